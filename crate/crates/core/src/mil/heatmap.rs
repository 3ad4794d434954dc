use std::path::{Path, PathBuf};

use crate::datastore::SlideBag;
use crate::error::{Error, Result};

pub const EMPTY_CELL: f64 = -1.0;

/// Attention laid out on the patch grid; empty cells hold [`EMPTY_CELL`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.cols + x]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.cols) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit PGM: empty cells are 0, values map to `1 + round(254·v)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.values.iter().map(|&v| if v < 0.0 { 0 } else { 1 + (254.0 * v).round() as u8 }));
        out
    }
}

/// Min-max normalized attention per grid cell. Patches at different
/// magnifications sharing a cell keep the larger value.
pub fn heatmap_grid(slide: &SlideBag, attention: &[f64]) -> Result<HeatmapGrid> {
    if attention.len() != slide.n_patches() {
        return Err(Error::Shape(format!(
            "{} attention weights for {} patches",
            attention.len(),
            slide.n_patches()
        )));
    }
    if slide.patches.is_empty() {
        return Err(Error::InvalidInput("heatmap of an empty slide".into()));
    }
    if let Some(i) = attention.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("attention weight {i}")));
    }
    let rows = slide.patches.iter().map(|p| p.y as usize).max().unwrap() + 1;
    let cols = slide.patches.iter().map(|p| p.x as usize).max().unwrap() + 1;
    let lo = attention.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut values = vec![EMPTY_CELL; rows * cols];
    for (p, &a) in slide.patches.iter().zip(attention) {
        let v = if hi > lo { (a - lo) / (hi - lo) } else { 0.5 };
        let cell = &mut values[p.y as usize * cols + p.x as usize];
        *cell = cell.max(v);
    }
    Ok(HeatmapGrid { rows, cols, values })
}

/// Writes `<stem>.csv` and `<stem>.pgm`; returns both paths.
pub fn export_heatmap(slide: &SlideBag, attention: &[f64], stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let grid = heatmap_grid(slide, attention)?;
    let stem = stem.as_ref();
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    std::fs::write(&csv, grid.to_csv()).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&pgm, grid.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
    Ok((csv, pgm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{Magnification, PatchEmbedding};

    fn slide(coords: &[(u32, u32)]) -> SlideBag {
        let patches = coords
            .iter()
            .map(|&(x, y)| PatchEmbedding { x, y, level: Magnification::X20, features: vec![0.0] })
            .collect();
        SlideBag::new("h", patches)
    }

    #[test]
    fn examples() {
        let g = heatmap_grid(&slide(&[(0, 0)]), &[0.3]).unwrap();
        assert_eq!((g.rows, g.cols, g.values.clone()), (1, 1, vec![0.5]));
        let g = heatmap_grid(&slide(&[(0, 0), (1, 0)]), &[0.9, 0.1]).unwrap();
        assert_eq!(g.values, vec![1.0, 0.0]);
        // (1, 1) is a hole
        let g = heatmap_grid(&slide(&[(0, 0), (1, 0), (0, 1)]), &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(g.get(1, 1), EMPTY_CELL);
        assert_eq!(g.to_csv().lines().nth(1).unwrap().split(',').nth(1), Some("-1"));
        let pgm = g.to_pgm();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[1, 86, 255, 0]);
        assert!(heatmap_grid(&slide(&[(0, 0)]), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, pgm) = export_heatmap(&slide(&[(0, 0), (2, 1)]), &[0.5, 0.25], dir.path().join("s1")).unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap(), "1,-1,-1\n-1,-1,0\n");
        assert_eq!(std::fs::read(pgm).unwrap().len(), "P5\n3 2\n255\n".len() + 6);
    }
}
