//! Confidence-weighted ROI sampling and global tumor/non-tumor balancing.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datastore::SlideBag;
use crate::error::{Error, Result};
use crate::numerics::{poisson_sample, RngStream};
use crate::parallel::par_map;

pub const NEGATIVE_SLIDE_LAMBDA: f64 = 8.0;
pub const DEFAULT_TUMOR_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RATIO_TOLERANCE: f64 = 0.02;

/// Ceiling that treats values within rounding noise of an integer as that
/// integer, so a decimal `p` gives the same count as exact arithmetic.
fn decimal_ceil(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as usize
    } else {
        v.ceil() as usize
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("tumor probability {p} outside [0, 1]")))
    }
}

/// `⌈12·p / 0.7⌉`
pub fn tumor_budget(p_tumor: f64) -> Result<usize> {
    check_prob(p_tumor)?;
    Ok(decimal_ceil(120.0 * p_tumor / 7.0))
}

/// `⌈4·(1 - p)⌉`
pub fn nontumor_budget(p_tumor: f64) -> Result<usize> {
    check_prob(p_tumor)?;
    Ok(decimal_ceil(4.0 * (1.0 - p_tumor)))
}

pub fn negative_slide_budget(rng: &mut RngStream) -> usize {
    poisson_sample(NEGATIVE_SLIDE_LAMBDA, rng).expect("constant lambda is valid") as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBudget {
    pub n_tumor: usize,
    pub n_nontumor: usize,
    pub n_negative_slide: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiClass {
    Tumor,
    NonTumor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiPick {
    pub patch_index: usize,
    pub predicted_class: RoiClass,
    pub p: f64,
}

/// ROIs chosen from one slide plus the budget that drove the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSelection {
    pub p_slide: f64,
    pub budget: SampleBudget,
    pub picks: Vec<RoiPick>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("tumor threshold {threshold} outside (0, 1)")))
    }
}

/// Picks tumor ROIs by confidence and non-tumor ROIs at random; slides with
/// no predicted-tumor patch contribute a Poisson-sized random draw instead.
pub fn select_rois(slide: &SlideBag, threshold: f64, rng: &mut RngStream) -> Result<RoiSelection> {
    check_threshold(threshold)?;
    let probs = slide
        .roi_tumor_probs
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("slide {} has no ROI tumor probabilities", slide.slide_id)))?;
    if probs.len() != slide.n_patches() {
        return Err(Error::Shape(format!(
            "slide {}: {} probabilities for {} patches",
            slide.slide_id,
            probs.len(),
            slide.n_patches()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("slide {}: probability {p} outside [0, 1]", slide.slide_id)));
    }
    let p_slide = probs.iter().copied().fold(0.0, f64::max);
    let (mut tumor, nontumor): (Vec<usize>, Vec<usize>) = (0..probs.len()).partition(|&i| probs[i] >= threshold);

    if tumor.is_empty() {
        let n3 = negative_slide_budget(rng);
        let mut idx = rng.sample_indices(probs.len(), n3.min(probs.len()));
        idx.sort_unstable();
        return Ok(RoiSelection {
            p_slide,
            budget: SampleBudget { n_tumor: 0, n_nontumor: 0, n_negative_slide: n3 },
            picks: idx
                .into_iter()
                .map(|i| RoiPick { patch_index: i, predicted_class: RoiClass::NonTumor, p: probs[i] })
                .collect(),
        });
    }

    let n1 = tumor_budget(p_slide)?;
    let n2 = nontumor_budget(p_slide)?;
    let key = |i: usize| slide.patches[i].grid_key();
    tumor.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then_with(|| key(a).cmp(&key(b))));
    tumor.truncate(n1);
    let mut chosen: Vec<usize> = rng
        .sample_indices(nontumor.len(), n2.min(nontumor.len()))
        .into_iter()
        .map(|k| nontumor[k])
        .collect();
    chosen.sort_unstable();

    let picks = tumor
        .into_iter()
        .map(|i| RoiPick { patch_index: i, predicted_class: RoiClass::Tumor, p: probs[i] })
        .chain(chosen.into_iter().map(|i| RoiPick { patch_index: i, predicted_class: RoiClass::NonTumor, p: probs[i] }))
        .collect();
    Ok(RoiSelection {
        p_slide,
        budget: SampleBudget { n_tumor: n1, n_nontumor: n2, n_negative_slide: 0 },
        picks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub slide_id: String,
    pub patch_index: usize,
    pub predicted_class: RoiClass,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideProvenance {
    pub slide_id: String,
    pub p_slide: f64,
    pub budget: SampleBudget,
    pub selected_tumor: usize,
    pub selected_nontumor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedDataset {
    pub entries: Vec<RoiEntry>,
    pub tumor_count: usize,
    pub nontumor_count: usize,
    /// Set when one class is empty and no balancing was possible.
    pub unbalanced_warning: bool,
    pub per_slide: Vec<SlideProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSummary {
    pub tumor_count: usize,
    pub nontumor_count: usize,
    /// tumor / non-tumor, absent when non-tumor is empty.
    pub ratio: Option<f64>,
    /// |tumor - nontumor| / max(tumor, nontumor).
    pub imbalance: Option<f64>,
    pub unbalanced_warning: bool,
    pub n_slides: usize,
}

pub fn imbalance(tumor: usize, nontumor: usize) -> Option<f64> {
    let big = tumor.max(nontumor);
    (tumor > 0 && nontumor > 0).then(|| tumor.abs_diff(nontumor) as f64 / big as f64)
}

impl RefinedDataset {
    pub fn summary(&self) -> RefinedSummary {
        RefinedSummary {
            tumor_count: self.tumor_count,
            nontumor_count: self.nontumor_count,
            ratio: (self.nontumor_count > 0).then(|| self.tumor_count as f64 / self.nontumor_count as f64),
            imbalance: imbalance(self.tumor_count, self.nontumor_count),
            unbalanced_warning: self.unbalanced_warning,
            n_slides: self.per_slide.len(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }
}

/// Largest majority count that keeps the pair within `tolerance`.
fn balanced_majority(minority: usize, majority: usize, tolerance: f64) -> usize {
    let mut keep = ((minority as f64 / (1.0 - tolerance)).floor() as usize).min(majority).max(minority);
    while keep > minority && (keep - minority) as f64 > tolerance * keep as f64 {
        keep -= 1;
    }
    keep
}

/// Runs [`select_rois`] on every slide (each with its own derived stream),
/// pools the picks and uniformly downsamples the majority class into the
/// tolerance band.
pub fn build_balanced_dataset(slides: &[SlideBag], threshold: f64, tolerance: f64, seed: u64) -> Result<RefinedDataset> {
    check_threshold(threshold)?;
    if !(0.0..1.0).contains(&tolerance) {
        return Err(Error::InvalidInput(format!("ratio tolerance {tolerance} outside [0, 1)")));
    }
    let root = RngStream::new(seed, 0x524f_4953); // "ROIS"
    let selections = par_map(slides.len(), |i| select_rois(&slides[i], threshold, &mut root.derive(i as u64)));

    let mut entries = Vec::new();
    let mut per_slide = Vec::with_capacity(slides.len());
    for (slide, sel) in slides.iter().zip(selections) {
        let sel = sel?;
        let t = sel.picks.iter().filter(|p| p.predicted_class == RoiClass::Tumor).count();
        per_slide.push(SlideProvenance {
            slide_id: slide.slide_id.clone(),
            p_slide: sel.p_slide,
            budget: sel.budget,
            selected_tumor: t,
            selected_nontumor: sel.picks.len() - t,
        });
        entries.extend(sel.picks.into_iter().map(|p| RoiEntry {
            slide_id: slide.slide_id.clone(),
            patch_index: p.patch_index,
            predicted_class: p.predicted_class,
            p: p.p,
        }));
    }

    let tumor = entries.iter().filter(|e| e.predicted_class == RoiClass::Tumor).count();
    let nontumor = entries.len() - tumor;
    if tumor == 0 || nontumor == 0 {
        warn!("refined dataset has {tumor} tumor and {nontumor} non-tumor ROIs; ratio undefined");
        return Ok(RefinedDataset { entries, tumor_count: tumor, nontumor_count: nontumor, unbalanced_warning: true, per_slide });
    }

    let (major, minor) = if tumor > nontumor { (RoiClass::Tumor, nontumor) } else { (RoiClass::NonTumor, tumor) };
    let n_major = tumor.max(nontumor);
    let keep = balanced_majority(minor, n_major, tolerance);
    if keep < n_major {
        let mut rng = RngStream::new(seed, 0x4241_4c41); // "BALA"
        let mut kept = vec![false; n_major];
        for k in rng.sample_indices(n_major, keep) {
            kept[k] = true;
        }
        let mut rank = 0;
        entries.retain(|e| {
            if e.predicted_class != major {
                return true;
            }
            rank += 1;
            kept[rank - 1]
        });
    }
    let tumor_count = entries.iter().filter(|e| e.predicted_class == RoiClass::Tumor).count();
    Ok(RefinedDataset {
        nontumor_count: entries.len() - tumor_count,
        tumor_count,
        entries,
        unbalanced_warning: false,
        per_slide,
    })
}
