//! Classification and segmentation metrics plus resampling statistics.

mod auroc;
mod bootstrap;
mod classification;
mod segmentation;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use auroc::{auroc, multiclass_auroc, roc_points};
pub use bootstrap::{bootstrap_ci, BootstrapCI, BootstrapOptions};
pub use classification::{balanced_accuracy, sensitivity_specificity, weighted_f1, ConfusionMatrix};
pub use segmentation::{dice_per_class, iou_per_class, mean_dice, mean_iou, LabelMask};

use crate::numerics::{mean, sample_variance};

/// One metric as it appears in a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub point: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub replicates: usize,
}

impl From<BootstrapCI> for MetricEntry {
    fn from(ci: BootstrapCI) -> Self {
        Self {
            point: ci.point,
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            replicates: ci.replicates,
        }
    }
}

pub type MetricReport = BTreeMap<String, MetricEntry>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

/// Mean ± sample standard deviation of each metric's point estimate across
/// folds. Metrics missing from some folds aggregate over the folds that
/// have them.
pub fn aggregate_folds(reports: &[MetricReport]) -> BTreeMap<String, FoldAggregate> {
    let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r {
            by_name.entry(k.clone()).or_default().push(v.point);
        }
    }
    by_name
        .into_iter()
        .map(|(k, v)| {
            let std = if v.len() > 1 { sample_variance(&v).sqrt() } else { 0.0 };
            (k, FoldAggregate { mean: mean(&v), std, folds: v.len() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_aggregation() {
        let mk = |v: f64| {
            let mut r = MetricReport::new();
            r.insert("auroc".into(), MetricEntry { point: v, ci_lower: v, ci_upper: v, replicates: 0 });
            r
        };
        let agg = aggregate_folds(&[mk(0.8), mk(0.9), mk(1.0)]);
        let a = agg["auroc"];
        assert!((a.mean - 0.9).abs() < 1e-15);
        assert!((a.std - 0.1).abs() < 1e-12);
        assert_eq!(a.folds, 3);
    }
}
