use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D grid of class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
}

impl LabelMask {
    pub fn new(rows: usize, cols: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::Shape(format!("{} labels for a {rows}x{cols} mask", labels.len())));
        }
        Ok(Self { rows, cols, labels })
    }
}

/// Per class: (|P ∩ T|, |P|, |T|).
fn overlaps(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<Vec<(u64, u64, u64)>> {
    if (pred.rows, pred.cols) != (truth.rows, truth.cols) {
        return Err(Error::Shape(format!(
            "mask shapes {}x{} and {}x{}",
            pred.rows, pred.cols, truth.rows, truth.cols
        )));
    }
    let mut out = vec![(0u64, 0u64, 0u64); n_classes];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::InvalidInput(format!("mask label outside {n_classes} classes")));
        }
        out[p].1 += 1;
        out[t].2 += 1;
        if p == t {
            out[p].0 += 1;
        }
    }
    Ok(out)
}

/// Per-class Dice; classes absent from both masks score 1.
pub fn dice_per_class(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<Vec<f64>> {
    Ok(overlaps(pred, truth, n_classes)?
        .into_iter()
        .map(|(i, p, t)| if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 })
        .collect())
}

/// Per-class IoU; classes absent from both masks score 1.
pub fn iou_per_class(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<Vec<f64>> {
    Ok(overlaps(pred, truth, n_classes)?
        .into_iter()
        .map(|(i, p, t)| {
            let union = p + t - i;
            if union == 0 { 1.0 } else { i as f64 / union as f64 }
        })
        .collect())
}

pub fn mean_dice(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<f64> {
    let d = dice_per_class(pred, truth, n_classes)?;
    Ok(d.iter().sum::<f64>() / n_classes as f64)
}

pub fn mean_iou(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<f64> {
    let d = iou_per_class(pred, truth, n_classes)?;
    Ok(d.iter().sum::<f64>() / n_classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_overlap() -> (LabelMask, LabelMask) {
        // class 1 occupies rows 0-1 in P and rows 1-2 in T: |P|=|T|=8, |P∩T|=4
        let p: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
        let t: Vec<usize> = (0..16).map(|i| usize::from((4..12).contains(&i))).collect();
        (LabelMask::new(4, 4, p).unwrap(), LabelMask::new(4, 4, t).unwrap())
    }

    #[test]
    fn examples() {
        let (p, t) = half_overlap();
        assert_eq!(mean_dice(&p, &p, 2).unwrap(), 1.0);
        assert_eq!(mean_iou(&t, &t, 2).unwrap(), 1.0);
        assert_eq!(dice_per_class(&p, &t, 2).unwrap()[1], 0.5);
        assert!((iou_per_class(&p, &t, 2).unwrap()[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = LabelMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = LabelMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice_per_class(&a, &b, 2).unwrap()[1], 0.0);
        // class 2 absent from both contributes 1
        assert_eq!(dice_per_class(&a, &b, 3).unwrap()[2], 1.0);
        assert!(mean_dice(&a, &LabelMask::new(2, 2, vec![0; 4]).unwrap(), 2).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_iou_dice_identity(
            cells in prop::collection::vec((0usize..3, 0usize..3), 1..40),
        ) {
            let n = cells.len();
            let p = LabelMask::new(1, n, cells.iter().map(|c| c.0).collect()).unwrap();
            let t = LabelMask::new(1, n, cells.iter().map(|c| c.1).collect()).unwrap();
            prop_assert_eq!(mean_dice(&p, &t, 3).unwrap(), mean_dice(&t, &p, 3).unwrap());
            prop_assert_eq!(mean_iou(&p, &t, 3).unwrap(), mean_iou(&t, &p, 3).unwrap());
            let d = dice_per_class(&p, &t, 3).unwrap();
            let u = iou_per_class(&p, &t, 3).unwrap();
            for (d, u) in d.iter().zip(&u) {
                prop_assert!(u <= d);
                prop_assert!((d - 2.0 * u / (1.0 + u)).abs() < 1e-12);
            }
        }
    }
}
