//! Synthetic cohorts with known ground truth.
//!
//! Background patches are `N(0, I)`. Class `c` signal patches are
//! `N(μ_c, I)` with `μ_c = (sep/√2)·e_c`, so class means sit `sep` apart.
//! A bag of class `c` holds `round(signal_fraction·n)` (at least one) signal
//! patches at random grid positions; the rest are background.
//!
//! Survival cohorts draw a latent `u ~ N(0, 1)` per slide; signal patches are
//! `N(u·sep·e_0, I)`. The ground-truth log-hazard is the first coordinate of
//! the slide's stored mean feature, times are exponential with rate
//! `exp(risk)/365`, and each slide is censored with probability
//! `censoring_rate` at a uniform fraction of its event time.

use serde::{Deserialize, Serialize};

use super::types::{Cohort, Magnification, PatchEmbedding, SlideBag, SurvivalRecord, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

fn default_sites() -> usize {
    1
}

fn default_kind() -> TaskKind {
    TaskKind::Classification
}

fn default_name() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_slides: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub class_mean_separation: f64,
    pub signal_fraction: f64,
    #[serde(default)]
    pub censoring_rate: f64,
    pub seed: u64,
    #[serde(default = "default_kind")]
    pub task_kind: TaskKind,
    #[serde(default = "default_sites")]
    pub n_sites: usize,
    /// Optional class names; defaults to `class_0..`.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    /// Attach simulated ROI-classifier probabilities to every patch.
    #[serde(default)]
    pub roi_probs: bool,
}

impl SynthSpec {
    pub fn classification(n_slides: usize, dim: usize, n_classes: usize, separation: f64, signal_fraction: f64, seed: u64) -> Self {
        Self {
            name: default_name(),
            n_slides,
            patches_min: 16,
            patches_max: 32,
            dim,
            n_classes,
            class_mean_separation: separation,
            signal_fraction,
            censoring_rate: 0.0,
            seed,
            task_kind: TaskKind::Classification,
            n_sites: 1,
            class_names: None,
            roi_probs: false,
        }
    }

    pub fn survival(n_slides: usize, dim: usize, separation: f64, signal_fraction: f64, censoring_rate: f64, seed: u64) -> Self {
        Self {
            n_classes: 0,
            censoring_rate,
            task_kind: TaskKind::Survival,
            ..Self::classification(n_slides, dim, 0, separation, signal_fraction, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("synth spec: {m}")));
        if self.n_slides == 0 {
            return bad("n_slides must be positive".into());
        }
        if self.patches_min == 0 || self.patches_max < self.patches_min {
            return bad(format!("bad patch range {}..={}", self.patches_min, self.patches_max));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.class_mean_separation >= 0.0 && self.class_mean_separation.is_finite()) {
            return bad(format!("separation {} must be finite and >= 0", self.class_mean_separation));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal_fraction {} outside (0, 1]", self.signal_fraction));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad(format!("censoring_rate {} outside [0, 1)", self.censoring_rate));
        }
        if self.n_sites == 0 {
            return bad("n_sites must be positive".into());
        }
        if self.task_kind != TaskKind::Survival {
            if self.n_classes < 2 {
                return bad(format!("need at least 2 classes, got {}", self.n_classes));
            }
            if self.dim < self.n_classes {
                return bad(format!("dim {} smaller than class count {}", self.dim, self.n_classes));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return bad(format!("{} class names for {} classes", names.len(), self.n_classes));
            }
        }
        Ok(())
    }
}

/// Ground truth that the cohort files do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Indices of signal patches per slide (in stored patch order).
    pub signal_patches: Vec<Vec<usize>>,
    /// True log-hazard per slide (survival cohorts; empty otherwise).
    pub risk: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub cohort: Cohort,
    pub truth: SynthTruth,
}

pub fn synth_cohort(spec: &SynthSpec) -> Result<Cohort> {
    Ok(synth_cohort_with_truth(spec)?.cohort)
}

pub fn synth_cohort_with_truth(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let root = RngStream::new(spec.seed, 0x5359_4e54); // "SYNT"
    let survival = spec.task_kind == TaskKind::Survival;
    let scale = spec.class_mean_separation / std::f64::consts::SQRT_2;
    let width = (spec.n_sites.to_string()).len().max(2);

    let mut slides = Vec::with_capacity(spec.n_slides);
    let mut signal_patches = Vec::with_capacity(spec.n_slides);
    let mut risks = Vec::new();
    for i in 0..spec.n_slides {
        let mut rng = root.derive(i as u64);
        let n = spec.patches_min + rng.below(spec.patches_max - spec.patches_min + 1);
        let grid_w = (n as f64).sqrt().ceil() as usize;
        let n_signal = ((spec.signal_fraction * n as f64).round() as usize).clamp(1, n);
        let mut signal = rng.sample_indices(n, n_signal);
        signal.sort_unstable();

        let label = (!survival).then(|| i % spec.n_classes);
        let latent = if survival { rng.standard_normal() } else { 0.0 };
        let mut is_signal = vec![false; n];
        signal.iter().for_each(|&j| is_signal[j] = true);

        let mut patches = Vec::with_capacity(n);
        for (j, &sig) in is_signal.iter().enumerate() {
            let mut features: Vec<f32> = (0..spec.dim).map(|_| rng.standard_normal() as f32).collect();
            if sig {
                match label {
                    Some(c) => features[c] += scale as f32,
                    None => features[0] += (latent * spec.class_mean_separation) as f32,
                }
            }
            patches.push(PatchEmbedding {
                x: (j % grid_w) as u32,
                y: (j / grid_w) as u32,
                level: Magnification::X20,
                features,
            });
        }
        let mut slide = SlideBag::new(format!("slide-{i:05}"), patches);
        slide.label = label;
        slide.site = format!("site-{:0width$}", i % spec.n_sites + 1);

        if spec.roi_probs {
            let positive = label.is_some_and(|c| c > 0);
            let probs = is_signal
                .iter()
                .map(|&sig| {
                    let u = rng.uniform();
                    if sig && positive { 0.6 + 0.4 * u } else { 0.45 * u }
                })
                .collect();
            slide.roi_tumor_probs = Some(probs);
        }

        if survival {
            let risk = slide.mean_feature()[0];
            let t = rng.exponential(risk.exp() / 365.0);
            let censored = rng.uniform() < spec.censoring_rate;
            let time = if censored {
                t * rng.uniform_open()
            } else {
                t
            };
            slide.survival = Some(SurvivalRecord::new(time, !censored)?);
            risks.push(risk);
        }
        slides.push(slide);
        signal_patches.push(signal);
    }

    let class_names = spec
        .class_names
        .clone()
        .unwrap_or_else(|| (0..spec.n_classes).map(|c| format!("class_{c}")).collect());
    let cohort = Cohort {
        name: spec.name.clone(),
        dim: spec.dim,
        class_names,
        slides,
        task_kind: spec.task_kind,
    };
    cohort.validate()?;
    Ok(SynthOutput {
        cohort,
        truth: SynthTruth {
            signal_patches,
            risk: risks,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::manifest::write_cohort;

    fn pair_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    /// Nearest-class-mean on bag means, class means estimated on a
    /// separate training cohort.
    fn class_means(c: &Cohort) -> Vec<Vec<f64>> {
        let k = c.n_classes();
        let mut sums = vec![vec![0.0; c.dim]; k];
        let mut counts = vec![0usize; k];
        for s in &c.slides {
            let l = s.label.unwrap();
            counts[l] += 1;
            for (a, b) in sums[l].iter_mut().zip(s.mean_feature()) {
                *a += b;
            }
        }
        for (s, n) in sums.iter_mut().zip(counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        sums
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    #[test]
    fn separable_bags_classified_by_nearest_mean() {
        let train = synth_cohort(&SynthSpec::classification(200, 8, 2, 6.0, 1.0, 1)).unwrap();
        let test = synth_cohort(&SynthSpec::classification(1000, 8, 2, 6.0, 1.0, 2)).unwrap();
        let means = class_means(&train);
        let correct = test
            .slides
            .iter()
            .filter(|s| {
                let m = s.mean_feature();
                let pred = if dist2(&m, &means[0]) <= dist2(&m, &means[1]) { 0 } else { 1 };
                pred == s.label.unwrap()
            })
            .count();
        assert!(correct as f64 / 1000.0 >= 0.99, "{correct}");
    }

    #[test]
    fn zero_separation_has_no_signal() {
        let train = synth_cohort(&SynthSpec::classification(200, 8, 2, 0.0, 1.0, 3)).unwrap();
        let test = synth_cohort(&SynthSpec::classification(1000, 8, 2, 0.0, 1.0, 4)).unwrap();
        let means = class_means(&train);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for s in &test.slides {
            let m = s.mean_feature();
            let score = dist2(&m, &means[0]) - dist2(&m, &means[1]);
            if s.label == Some(1) { pos.push(score) } else { neg.push(score) }
        }
        let auc = pair_auc(&pos, &neg);
        assert!((auc - 0.5).abs() <= 0.03, "{auc}");
    }

    #[test]
    fn deterministic_bytes() {
        let spec = SynthSpec {
            roi_probs: true,
            n_sites: 3,
            ..SynthSpec::classification(12, 4, 3, 2.0, 0.25, 9)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_cohort(&synth_cohort(&spec).unwrap(), a.path()).unwrap();
        write_cohort(&synth_cohort(&spec).unwrap(), b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() { out.extend(walk(&p)) } else { out.push(p) }
        }
        out
    }

    #[test]
    fn survival_without_censoring_is_all_events() {
        let out = synth_cohort_with_truth(&SynthSpec::survival(300, 4, 4.0, 0.5, 0.0, 5)).unwrap();
        assert!(out.cohort.slides.iter().all(|s| s.survival.unwrap().event));
        assert_eq!(out.truth.risk.len(), 300);
        let censored = synth_cohort(&SynthSpec::survival(2000, 4, 4.0, 0.5, 0.3, 5)).unwrap();
        let rate = censored.slides.iter().filter(|s| !s.survival.unwrap().event).count() as f64 / 2000.0;
        assert!((rate - 0.3).abs() < 0.04, "{rate}");
        assert!(censored.slides.iter().all(|s| s.survival.unwrap().time_days > 0.0));
    }

    #[test]
    fn signal_fraction_and_layout() {
        let out = synth_cohort_with_truth(&SynthSpec::classification(20, 4, 2, 6.0, 0.1, 7)).unwrap();
        for (s, sig) in out.cohort.slides.iter().zip(&out.truth.signal_patches) {
            let n = s.n_patches();
            assert_eq!(sig.len(), ((0.1 * n as f64).round() as usize).max(1));
            let mut keys: Vec<_> = s.patches.iter().map(|p| p.grid_key()).collect();
            let sorted = { let mut k = keys.clone(); k.sort(); k };
            assert_eq!(keys, sorted);
            keys.dedup();
            assert_eq!(keys.len(), n);
        }
    }

    #[test]
    fn invalid_specs() {
        let ok = SynthSpec::classification(10, 4, 2, 1.0, 0.5, 0);
        assert!(synth_cohort(&SynthSpec { signal_fraction: 0.0, ..ok.clone() }).is_err());
        assert!(synth_cohort(&SynthSpec { class_mean_separation: -1.0, ..ok.clone() }).is_err());
        assert!(synth_cohort(&SynthSpec { dim: 1, ..ok.clone() }).is_err());
        assert!(synth_cohort(&SynthSpec { censoring_rate: 1.0, ..ok }).is_err());
    }
}
