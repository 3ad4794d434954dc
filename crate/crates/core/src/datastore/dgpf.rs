//! DGPF patch-feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! 0..4    b"DGPF"
//! 4..8    version u32 (= 1)
//! 8..12   dim u32
//! 12..16  n_patches u32
//! 16..    n_patches × { x: i32, y: i32, level: u8, pad: [u8; 3] = 0 }
//!         n_patches × dim f32 features, row-major
//! ```

use std::fs;
use std::path::Path;

use super::types::{Magnification, PatchEmbedding, SlideBag};
use crate::error::{Error, Result};

pub const DGPF_MAGIC: &[u8; 4] = b"DGPF";
pub const DGPF_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;
const RECORD_LEN: u64 = 12;

/// Expected size in bytes of a DGPF file.
pub fn dgpf_file_len(n_patches: usize, dim: usize) -> u64 {
    HEADER_LEN + RECORD_LEN * n_patches as u64 + 4 * (n_patches as u64) * (dim as u64)
}

/// Decoded patch payload of a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePayload {
    pub dim: usize,
    pub patches: Vec<PatchEmbedding>,
}

pub fn encode_dgpf(slide: &SlideBag) -> Result<Vec<u8>> {
    let dim = slide.dim();
    if dim == 0 {
        return Err(Error::InvalidInput(format!("slide {:?}: feature dim 0", slide.slide_id)));
    }
    slide.validate(dim)?;
    let n = slide.patches.len();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(dgpf_file_len(n, dim) as usize);
    buf.extend_from_slice(DGPF_MAGIC);
    buf.extend_from_slice(&DGPF_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(n, "patch count")?.to_le_bytes());
    for p in &slide.patches {
        let x = i32::try_from(p.x).map_err(|_| Error::InvalidInput(format!("x {} exceeds i32", p.x)))?;
        let y = i32::try_from(p.y).map_err(|_| Error::InvalidInput(format!("y {} exceeds i32", p.y)))?;
        buf.extend_from_slice(&x.to_le_bytes());
        buf.extend_from_slice(&y.to_le_bytes());
        buf.push(p.level.code());
        buf.extend_from_slice(&[0, 0, 0]);
    }
    for p in &slide.patches {
        for v in &p.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes `slide` as DGPF and returns the byte count.
pub fn write_feature_file(slide: &SlideBag, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_dgpf(slide)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Decodes a DGPF buffer; `path` is only used in error messages.
pub fn decode_dgpf(bytes: &[u8], path: &Path) -> Result<FeaturePayload> {
    let actual = bytes.len() as u64;
    if actual < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            actual,
        });
    }
    if &bytes[0..4] != DGPF_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "DGPF".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    if actual < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            actual,
        });
    }
    let version = u32_at(bytes, 4);
    if version != DGPF_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: DGPF_VERSION,
            found: version,
        });
    }
    let dim = u32_at(bytes, 8) as usize;
    let n = u32_at(bytes, 12) as usize;
    if dim == 0 || n == 0 {
        return Err(Error::InvalidInput(format!(
            "{}: n_patches = {n}, dim = {dim}; both must be positive",
            path.display()
        )));
    }
    let expected = dgpf_file_len(n, dim);
    if actual < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::InvalidInput(format!(
            "{}: {} trailing bytes after {expected}-byte payload",
            path.display(),
            actual - expected
        )));
    }

    let mut patches = Vec::with_capacity(n);
    let feat_base = (HEADER_LEN + RECORD_LEN * n as u64) as usize;
    for i in 0..n {
        let off = HEADER_LEN as usize + i * RECORD_LEN as usize;
        let x = i32_at(bytes, off);
        let y = i32_at(bytes, off + 4);
        if x < 0 || y < 0 {
            return Err(Error::InvalidInput(format!(
                "{}: patch {i} has negative grid position ({x}, {y})",
                path.display()
            )));
        }
        let level = Magnification::from_code(bytes[off + 8])?;
        if bytes[off + 9..off + 12] != [0, 0, 0] {
            return Err(Error::InvalidInput(format!(
                "{}: patch {i} has non-zero padding",
                path.display()
            )));
        }
        let fo = feat_base + i * dim * 4;
        let features = bytes[fo..fo + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        patches.push(PatchEmbedding {
            x: x as u32,
            y: y as u32,
            level,
            features,
        });
    }
    Ok(FeaturePayload { dim, patches })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeaturePayload> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dgpf(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slide(n: usize, dim: usize) -> SlideBag {
        let patches = (0..n)
            .map(|i| PatchEmbedding {
                x: i as u32,
                y: 0,
                level: Magnification::X20,
                features: (0..dim).map(|j| (i * dim + j) as f32 * 0.5 - 1.0).collect(),
            })
            .collect();
        SlideBag::new("s", patches)
    }

    #[test]
    fn size_formula() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dgpf");
        assert_eq!(write_feature_file(&slide(1, 2), &p).unwrap(), 36);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 36);
        assert_eq!(dgpf_file_len(1, 2), 36);
    }

    #[test]
    fn empty_slide_rejected() {
        let s = SlideBag::new("s", vec![]);
        assert!(encode_dgpf(&s).is_err());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = encode_dgpf(&slide(3, 4)).unwrap();
        let p = Path::new("x.dgpf");
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_dgpf(short, p), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_dgpf(&long, p).is_err());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_dgpf(&bytes, p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_and_zero_sizes() {
        let bytes = encode_dgpf(&slide(2, 2)).unwrap();
        let p = Path::new("x.dgpf");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_dgpf(&v2, p), Err(Error::VersionMismatch { found: 2, .. })));
        let mut zero_dim = bytes.clone();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_dgpf(&zero_dim, p), Err(Error::InvalidInput(_))));
        let mut zero_n = bytes;
        zero_n[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_dgpf(&zero_n, p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_level_code() {
        let mut bytes = encode_dgpf(&slide(1, 1)).unwrap();
        bytes[16 + 8] = 9;
        assert!(decode_dgpf(&bytes, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            feats in prop::collection::vec(prop::collection::vec(any::<u32>(), 3), 1..12),
            level in 0u8..4,
        ) {
            let patches: Vec<PatchEmbedding> = feats.iter().enumerate().map(|(i, f)| PatchEmbedding {
                x: (i % 4) as u32,
                y: (i / 4) as u32,
                level: Magnification::from_code(level).unwrap(),
                // arbitrary finite bit patterns
                features: f.iter().map(|&b| {
                    let v = f32::from_bits(b);
                    if v.is_finite() { v } else { f32::from_bits(b & 0x3fff_ffff) }
                }).collect(),
            }).collect();
            let slide = SlideBag::new("p", patches);
            let bytes = encode_dgpf(&slide).unwrap();
            prop_assert_eq!(bytes.len() as u64, dgpf_file_len(slide.n_patches(), 3));
            let back = decode_dgpf(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(back.dim, 3);
            for (a, b) in back.patches.iter().zip(&slide.patches) {
                prop_assert_eq!(a.grid_key(), b.grid_key());
                let ab: Vec<u32> = a.features.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.features.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
