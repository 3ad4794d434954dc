use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{quantile_sorted, RngStream};
use crate::parallel::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub alpha: f64,
    /// Resamples on which the metric was undefined and that were redrawn.
    pub redraws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            alpha: 0.05,
            seed,
        }
    }
}

/// Percentile bootstrap over sample indices.
///
/// `metric` receives a multiset of indices into the sample and returns
/// `None` when the metric is undefined on it (e.g. a single-class resample);
/// such resamples are redrawn, with at most `10 × replicates` redraws in
/// total.
pub fn bootstrap_ci<F>(metric: F, n_samples: usize, opts: &BootstrapOptions) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n_samples < 2 {
        return Err(Error::InvalidInput(format!("bootstrap needs >= 2 samples, got {n_samples}")));
    }
    if opts.replicates == 0 || !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidInput("bootstrap needs replicates > 0 and alpha in (0, 1)".into()));
    }
    let all: Vec<usize> = (0..n_samples).collect();
    let point = metric(&all)
        .ok_or_else(|| Error::Undefined("metric undefined on the full sample".into()))?;

    let cap = 10 * opts.replicates;
    let root = RngStream::new(opts.seed, 0x424f_4f54); // "BOOT"
    // Each replicate may redraw up to the global cap; the total is checked after.
    let draws: Vec<(Option<f64>, usize)> = par_map(opts.replicates, |r| {
        let mut rng = root.derive(r as u64);
        let mut idx = vec![0usize; n_samples];
        let mut redraws = 0;
        loop {
            idx.iter_mut().for_each(|i| *i = rng.below(n_samples));
            if let Some(v) = metric(&idx) {
                return (Some(v), redraws);
            }
            redraws += 1;
            if redraws > cap {
                return (None, redraws);
            }
        }
    });
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    if redraws > cap || draws.iter().any(|d| d.0.is_none()) {
        return Err(Error::Undefined(format!(
            "bootstrap redraw cap exceeded ({redraws} undefined resamples, cap {cap})"
        )));
    }
    let mut values: Vec<f64> = draws.into_iter().map(|d| d.0.unwrap()).collect();
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCI {
        point,
        lower: quantile_sorted(&values, opts.alpha / 2.0),
        upper: quantile_sorted(&values, 1.0 - opts.alpha / 2.0),
        replicates: opts.replicates,
        alpha: opts.alpha,
        redraws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_metric() {
        let ci = bootstrap_ci(|_| Some(0.7), 10, &BootstrapOptions::new(200, 1)).unwrap();
        assert_eq!((ci.lower, ci.point, ci.upper), (0.7, 0.7, 0.7));
    }

    #[test]
    fn accuracy_width_matches_normal_approximation() {
        let correct: Vec<bool> = (0..1000).map(|i| i % 10 != 0).collect();
        let acc = |idx: &[usize]| Some(idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64);
        let ci = bootstrap_ci(acc, 1000, &BootstrapOptions::new(1000, 5)).unwrap();
        let expected = 2.0 * 1.96 * (0.09f64 / 1000.0).sqrt();
        let width = ci.upper - ci.lower;
        assert!((width - expected).abs() <= 0.3 * expected, "{width} vs {expected}");
        assert!(ci.lower <= 0.9 && 0.9 <= ci.upper);
    }

    #[test]
    fn deterministic() {
        let data: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let mean = |idx: &[usize]| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        let a = bootstrap_ci(mean, 50, &BootstrapOptions::new(300, 9)).unwrap();
        let b = bootstrap_ci(mean, 50, &BootstrapOptions::new(300, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn undefined_resamples_are_redrawn() {
        // defined only when index 0 is present (~63% of resamples of size 3)
        let m = |idx: &[usize]| idx.contains(&0).then_some(1.0);
        let ci = bootstrap_ci(m, 3, &BootstrapOptions::new(100, 2)).unwrap();
        assert!(ci.redraws > 0);
        let never = |idx: &[usize]| (idx.len() > 100).then_some(1.0);
        assert!(bootstrap_ci(never, 3, &BootstrapOptions::new(10, 2)).is_err());
    }
}
