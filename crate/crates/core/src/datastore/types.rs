use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Magnification a patch was tiled at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "2.5x")]
    X2_5,
    #[serde(rename = "5x")]
    X5,
    #[serde(rename = "10x")]
    X10,
    #[serde(rename = "20x")]
    X20,
}

impl Magnification {
    pub fn code(self) -> u8 {
        match self {
            Magnification::X2_5 => 0,
            Magnification::X5 => 1,
            Magnification::X10 => 2,
            Magnification::X20 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Magnification::X2_5,
            1 => Magnification::X5,
            2 => Magnification::X10,
            3 => Magnification::X20,
            other => {
                return Err(Error::InvalidInput(format!("unknown magnification code {other}")))
            }
        })
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Magnification::X2_5 => "2.5x",
            Magnification::X5 => "5x",
            Magnification::X10 => "10x",
            Magnification::X20 => "20x",
        };
        f.write_str(s)
    }
}

/// One patch: grid position, magnification and its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedding {
    pub x: u32,
    pub y: u32,
    pub level: Magnification,
    pub features: Vec<f32>,
}

impl PatchEmbedding {
    /// Row-major grid key used for canonical ordering and tie-breaks.
    pub fn grid_key(&self) -> (u32, u32, Magnification) {
        (self.y, self.x, self.level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time_days: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time_days: f64, event: bool) -> Result<Self> {
        if !(time_days.is_finite() && time_days > 0.0) {
            return Err(Error::InvalidInput(format!(
                "survival time must be finite and positive, got {time_days}"
            )));
        }
        Ok(Self { time_days, event })
    }
}

/// A slide as a bag of patch embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideBag {
    pub slide_id: String,
    pub patches: Vec<PatchEmbedding>,
    pub label: Option<usize>,
    pub site: String,
    pub fold: Option<usize>,
    pub survival: Option<SurvivalRecord>,
    /// Per-patch tumor probability from an ROI classifier.
    pub roi_tumor_probs: Option<Vec<f64>>,
}

impl SlideBag {
    pub fn new(slide_id: impl Into<String>, patches: Vec<PatchEmbedding>) -> Self {
        Self {
            slide_id: slide_id.into(),
            patches,
            label: None,
            site: "default".into(),
            fold: None,
            survival: None,
            roi_tumor_probs: None,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn dim(&self) -> usize {
        self.patches.first().map_or(0, |p| p.features.len())
    }

    /// Checks the bag invariants against the cohort dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::InvalidInput(format!("slide {:?} has no patches", self.slide_id)));
        }
        let mut seen = HashSet::with_capacity(self.patches.len());
        for (i, p) in self.patches.iter().enumerate() {
            if p.features.len() != dim {
                return Err(Error::Shape(format!(
                    "slide {:?} patch {i}: {} features, cohort dim {dim}",
                    self.slide_id,
                    p.features.len()
                )));
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("slide {:?} patch {i}", self.slide_id)));
            }
            if !seen.insert(p.grid_key()) {
                return Err(Error::InvalidInput(format!(
                    "slide {:?}: duplicate patch at x={} y={} level={}",
                    self.slide_id, p.x, p.y, p.level
                )));
            }
        }
        if let Some(probs) = &self.roi_tumor_probs {
            if probs.len() != self.patches.len() {
                return Err(Error::Shape(format!(
                    "slide {:?}: {} ROI probabilities for {} patches",
                    self.slide_id,
                    probs.len(),
                    self.patches.len()
                )));
            }
            if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidInput(format!(
                    "slide {:?}: ROI probability {p} outside [0, 1]",
                    self.slide_id
                )));
            }
        }
        if let Some(s) = &self.survival {
            SurvivalRecord::new(s.time_days, s.event)?;
        }
        Ok(())
    }

    /// Reorders patches (and their probabilities) into row-major grid order.
    pub fn sort_patches(&mut self) {
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        order.sort_by_key(|&i| self.patches[i].grid_key());
        if order.iter().enumerate().all(|(i, &j)| i == j) {
            return;
        }
        let patches = order.iter().map(|&i| self.patches[i].clone()).collect();
        self.patches = patches;
        if let Some(p) = &self.roi_tumor_probs {
            self.roi_tumor_probs = Some(order.iter().map(|&i| p[i]).collect());
        }
    }

    /// Features upcast to `f64`, one row per patch.
    pub fn feature_matrix(&self) -> DenseMatrix {
        let dim = self.dim();
        let data = self
            .patches
            .iter()
            .flat_map(|p| p.features.iter().map(|&v| v as f64))
            .collect();
        DenseMatrix::new(self.patches.len(), dim, data).expect("validated bag")
    }

    pub fn mean_feature(&self) -> Vec<f64> {
        self.feature_matrix().column_mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Survival,
    Screening,
}

/// Train/validation/test slide indices for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: String,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub slides: Vec<SlideBag>,
    pub task_kind: TaskKind,
}

impl Cohort {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("cohort dim is 0".into()));
        }
        let mut ids = HashSet::with_capacity(self.slides.len());
        for s in &self.slides {
            s.validate(self.dim)?;
            if !ids.insert(s.slide_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate slide_id {:?}", s.slide_id)));
            }
            if let Some(l) = s.label {
                if l >= self.n_classes() {
                    return Err(Error::InvalidInput(format!(
                        "slide {:?}: label {l} >= class count {}",
                        s.slide_id,
                        self.n_classes()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_folds(&self) -> Option<usize> {
        self.slides.iter().map(|s| s.fold).collect::<Option<Vec<_>>>()?.into_iter().max().map(|m| m + 1)
    }

    /// Test = `test_fold`, validation = the next fold (cyclically), train = the rest.
    pub fn split(&self, test_fold: usize) -> Result<FoldSplit> {
        let k = self
            .n_folds()
            .ok_or_else(|| Error::InvalidInput("cohort has slides without a fold; run fold assignment".into()))?;
        if k < 2 {
            return Err(Error::InvalidInput("need at least 2 folds".into()));
        }
        if test_fold >= k {
            return Err(Error::InvalidInput(format!("fold {test_fold} out of range for {k} folds")));
        }
        let val_fold = if k == 2 { None } else { Some((test_fold + 1) % k) };
        let mut split = FoldSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, s) in self.slides.iter().enumerate() {
            let f = s.fold.unwrap();
            if f == test_fold {
                split.test.push(i);
            } else if Some(f) == val_fold {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
        if split.val.is_empty() {
            // two folds: validate on the training fold itself
            split.val = split.train.clone();
        }
        Ok(split)
    }

    pub fn slide_index(&self, slide_id: &str) -> Option<usize> {
        self.slides.iter().position(|s| s.slide_id == slide_id)
    }
}
