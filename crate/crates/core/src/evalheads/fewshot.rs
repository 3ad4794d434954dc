use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, quantile_sorted, RngStream};
use crate::parallel::par_map;

pub const DEFAULT_QUERY_PER_CLASS: usize = 15;

/// Embeddings grouped by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub classes: Vec<Vec<Vec<f64>>>,
}

impl FeatureBank {
    pub fn new(classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = classes.iter().flatten().next().map(|v| v.len()).unwrap_or(0);
        if classes.iter().flatten().any(|v| v.len() != dim) {
            return Err(Error::Shape("feature bank vectors have different lengths".into()));
        }
        if classes.iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature bank".into()));
        }
        Ok(Self { classes })
    }

    pub fn from_labelled(features: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!("{} features vs {} labels", features.len(), labels.len())));
        }
        let mut classes = vec![Vec::new(); n_classes];
        for (f, &l) in features.iter().zip(labels) {
            classes
                .get_mut(l)
                .ok_or_else(|| Error::InvalidInput(format!("label {l} with {n_classes} classes")))?
                .push(f.clone());
        }
        Self::new(classes)
    }

    /// Gaussian clusters with means `(sep/√2)·e_c` (so means are `sep`
    /// apart) and unit isotropic noise.
    pub fn synthetic(n_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if dim < n_classes {
            return Err(Error::InvalidInput(format!("dim {dim} < {n_classes} classes")));
        }
        let root = RngStream::new(seed, 0x4241_4e4b); // "BANK"
        let scale = separation / std::f64::consts::SQRT_2;
        let classes = (0..n_classes)
            .map(|c| {
                let mut rng = root.derive(c as u64);
                (0..per_class)
                    .map(|_| {
                        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
                        v[c] += scale;
                        v
                    })
                    .collect()
            })
            .collect();
        Self::new(classes)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes.iter().flatten().next().map(|v| v.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_ways: usize,
    pub n_shots: usize,
    pub query_per_class: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn check(&self, bank: &FeatureBank) -> Result<()> {
        if self.n_ways < 2 || self.n_shots == 0 || self.query_per_class == 0 {
            return Err(Error::InvalidInput("episodes need ways >= 2, shots >= 1 and queries >= 1".into()));
        }
        let need = self.n_shots + self.query_per_class;
        let eligible = bank.classes.iter().filter(|c| c.len() >= need).count();
        if eligible < self.n_ways {
            return Err(Error::Unsatisfiable(format!(
                "{}-way {}-shot with {} queries: only {eligible} classes have {need} samples",
                self.n_ways, self.n_shots, self.query_per_class
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub accuracy: f64,
    /// Vectors that coincided with the support mean and could not be normalized.
    pub zero_vectors: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(protos: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, p) in protos.iter().enumerate() {
        let d = dist2(p, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Centers on the support mean, then L2-normalizes. `None` for vectors equal
/// to the mean.
fn transform(v: &[f64], mu: &[f64]) -> Option<Vec<f64>> {
    let c: Vec<f64> = v.iter().zip(mu).map(|(a, b)| a - b).collect();
    let n = norm2(&c);
    (n > 0.0).then(|| c.into_iter().map(|x| x / n).collect())
}

/// One SimpleShot episode. Ways are drawn among classes with enough
/// samples; support and query sets are disjoint.
pub fn simpleshot_episode(bank: &FeatureBank, spec: &EpisodeSpec, rng: &mut RngStream) -> Result<EpisodeResult> {
    spec.check(bank)?;
    let need = spec.n_shots + spec.query_per_class;
    let eligible: Vec<usize> = (0..bank.n_classes()).filter(|&c| bank.classes[c].len() >= need).collect();
    let mut ways: Vec<usize> = rng.sample_indices(eligible.len(), spec.n_ways).into_iter().map(|k| eligible[k]).collect();
    ways.sort_unstable();

    let dim = bank.dim();
    let mut support: Vec<Vec<&[f64]>> = Vec::with_capacity(ways.len());
    let mut query: Vec<(usize, &[f64])> = Vec::new();
    for (w, &c) in ways.iter().enumerate() {
        let idx = rng.sample_indices(bank.classes[c].len(), need);
        support.push(idx[..spec.n_shots].iter().map(|&i| bank.classes[c][i].as_slice()).collect());
        query.extend(idx[spec.n_shots..].iter().map(|&i| (w, bank.classes[c][i].as_slice())));
    }

    let total = (ways.len() * spec.n_shots) as f64;
    let mut mu = vec![0.0; dim];
    for v in support.iter().flatten() {
        mu.iter_mut().zip(*v).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= total);

    let mut zero_vectors = 0;
    let mut protos = Vec::with_capacity(ways.len());
    let mut raw_protos = Vec::with_capacity(ways.len());
    for class in &support {
        let mut p = vec![0.0; dim];
        let mut raw = vec![0.0; dim];
        for v in class {
            raw.iter_mut().zip(*v).for_each(|(r, x)| *r += x);
            match transform(v, &mu) {
                Some(t) => p.iter_mut().zip(&t).for_each(|(a, b)| *a += b),
                None => zero_vectors += 1,
            }
        }
        let k = class.len() as f64;
        p.iter_mut().for_each(|x| *x /= k);
        raw.iter_mut().for_each(|x| *x /= k);
        protos.push(p);
        raw_protos.push(raw);
    }

    let mut correct = 0;
    for (w, q) in &query {
        let pred = match transform(q, &mu) {
            Some(t) => nearest(&protos, &t),
            None => {
                zero_vectors += 1;
                nearest(&raw_protos, q)
            }
        };
        correct += usize::from(pred == *w);
    }
    Ok(EpisodeResult { accuracy: correct as f64 / query.len() as f64, zero_vectors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub episodes: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub zero_vectors: usize,
}

impl ShotSummary {
    pub fn iqr(&self) -> f64 {
        self.q75 - self.q25
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub ways: usize,
    pub query_per_class: usize,
    pub results: Vec<ShotSummary>,
    /// Shot counts the bank cannot support.
    pub skipped: Vec<usize>,
}

/// Runs `episodes` episodes per shot count, each on its own derived stream.
pub fn run_fewshot(
    bank: &FeatureBank,
    shots: &[usize],
    episodes: usize,
    ways: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<FewShotReport> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be >= 1".into()));
    }
    let mut report = FewShotReport { ways, query_per_class, results: Vec::new(), skipped: Vec::new() };
    for &k in shots {
        let spec = EpisodeSpec { n_ways: ways, n_shots: k, query_per_class, seed };
        match spec.check(bank) {
            Ok(()) => {}
            Err(Error::Unsatisfiable(msg)) => {
                warn!("skipping {k}-shot: {msg}");
                report.skipped.push(k);
                continue;
            }
            Err(e) => return Err(e),
        }
        let root = RngStream::new(seed, 0x5348_4f54_0000_0000 | k as u64); // "SHOT"
        let runs = par_map(episodes, |e| simpleshot_episode(bank, &spec, &mut root.derive(e as u64)));
        let runs: Vec<EpisodeResult> = runs.into_iter().collect::<Result<_>>()?;
        let mut acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        acc.sort_by(f64::total_cmp);
        report.results.push(ShotSummary {
            shots: k,
            episodes,
            median: quantile_sorted(&acc, 0.5),
            q25: quantile_sorted(&acc, 0.25),
            q75: quantile_sorted(&acc, 0.75),
            min: acc[0],
            max: acc[acc.len() - 1],
            mean,
            zero_vectors: runs.iter().map(|r| r.zero_vectors).sum(),
        });
    }
    Ok(report)
}
