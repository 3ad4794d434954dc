use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::attention::Bag;
use super::model::{MilGrad, MilModel};
use crate::datastore::{Cohort, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{balanced_accuracy, ConfusionMatrix};
use crate::numerics::{adam_step, argmax, AdamConfig, AdamState, RngStream};
use crate::parallel::par_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilTrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::patience")]
    pub early_stop_patience: usize,
    #[serde(default = "defaults::batch_slides")]
    pub batch_slides: usize,
    pub seed: u64,
    #[serde(default = "defaults::attn_dim")]
    pub attn_dim: usize,
    #[serde(default = "defaults::init_scale")]
    pub weight_init_scale: f64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn patience() -> usize {
        5
    }
    pub fn batch_slides() -> usize {
        1
    }
    pub fn attn_dim() -> usize {
        128
    }
    pub fn init_scale() -> f64 {
        1.0
    }
}

impl MilTrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            epochs: defaults::epochs(),
            early_stop_patience: defaults::patience(),
            batch_slides: defaults::batch_slides(),
            seed,
            attn_dim: defaults::attn_dim(),
            weight_init_scale: defaults::init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_slides == 0 || self.attn_dim == 0 {
            return Err(Error::Config("epochs, batch_slides and attn_dim must be >= 1".into()));
        }
        if !(self.weight_init_scale.is_finite() && self.weight_init_scale > 0.0) {
            return Err(Error::Config(format!("weight_init_scale must be > 0, got {}", self.weight_init_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Labelled bags ready for training.
pub struct LabelledBags {
    pub bags: Vec<Bag>,
    pub labels: Vec<usize>,
}

impl LabelledBags {
    pub fn from_cohort(cohort: &Cohort, indices: &[usize]) -> Result<Self> {
        let mut bags = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &cohort.slides[i];
            let label = s
                .label
                .ok_or_else(|| Error::InvalidInput(format!("slide {} has no label", s.slide_id)))?;
            bags.push(Bag::from_slide(s)?);
            labels.push(label);
        }
        Ok(Self { bags, labels })
    }
}

struct Optimizer {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    fn new(model: &MilModel, lr: f64) -> Self {
        Self {
            cfg: AdamConfig::with_lr(lr),
            states: model.blocks().iter().map(|b| AdamState::new(b.len())).collect(),
        }
    }

    fn step(&mut self, model: &mut MilModel, grad: &MilGrad) -> Result<()> {
        for ((p, g), st) in model.blocks_mut().into_iter().zip(grad.blocks()).zip(&mut self.states) {
            adam_step(p, g, st, &self.cfg)?;
        }
        Ok(())
    }
}

/// Mean cross-entropy and balanced accuracy of `model` on `data`.
pub fn evaluate_bags(model: &MilModel, data: &LabelledBags) -> Result<(f64, f64)> {
    let outs = par_map(data.bags.len(), |i| -> Result<(f64, usize)> {
        let logits = model.bag_forward(&data.bags[i])?.logits;
        let lse = crate::numerics::log_sum_exp(&logits)?;
        Ok((lse - logits[data.labels[i]], argmax(&logits)))
    });
    let mut loss = 0.0;
    let mut pred = Vec::with_capacity(outs.len());
    for o in outs {
        let (l, p) = o?;
        loss += l;
        pred.push(p);
    }
    let cm = ConfusionMatrix::from_labels(&data.labels, &pred, model.n_classes())?;
    Ok((loss / data.bags.len().max(1) as f64, balanced_accuracy(&cm)?))
}

/// Adam on mean cross-entropy with early stopping on validation balanced
/// accuracy. Ties in balanced accuracy are broken by lower validation loss,
/// so training continues while the fit keeps improving after accuracy
/// saturates.
pub fn train_mil_bags(
    train: &LabelledBags,
    val: &LabelledBags,
    n_classes: usize,
    cfg: &MilTrainConfig,
) -> Result<(MilModel, TrainingLog)> {
    cfg.validate()?;
    let first = train
        .bags
        .first()
        .ok_or_else(|| Error::InvalidInput("empty training split".into()))?;
    if val.bags.is_empty() {
        return Err(Error::InvalidInput("empty validation split".into()));
    }
    let mut seen = vec![false; n_classes];
    for &l in &train.labels {
        *seen.get_mut(l).ok_or_else(|| Error::InvalidInput(format!("label {l} with {n_classes} classes")))? = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidInput("training split contains a single class".into()));
    }

    let root = RngStream::new(cfg.seed, 0x4d49_4c54); // "MILT"
    let mut model = MilModel::init(first.dim(), cfg.attn_dim, n_classes, cfg.weight_init_scale, &mut root.derive(0))?;
    let mut opt = Optimizer::new(&model, cfg.learning_rate);
    let mut best = (model.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut log = TrainingLog { epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.bags.len()).collect();

    for epoch in 1..=cfg.epochs {
        root.derive(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_slides) {
            let mut grad = MilGrad::zeros(&model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                total += model.loss_and_grad(&train.bags[i], train.labels[i], scale, &mut grad)?;
            }
            opt.step(&mut model, &grad)?;
        }
        let train_loss = total / train.bags.len() as f64;
        if !train_loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!("MIL training diverged at epoch {epoch}")));
        }
        let (val_loss, val_bacc) = evaluate_bags(&model, val)?;
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} bacc {val_bacc:.4}");
        log.epochs.push(EpochRecord { epoch, train_loss, val_loss, val_balanced_accuracy: val_bacc });

        if val_bacc > best.1 || (val_bacc == best.1 && val_loss < best.2) {
            best = (model.clone(), val_bacc, val_loss, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                log.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    log.best_epoch = best.3;
    info!("MIL training kept epoch {} (val balanced accuracy {:.4})", best.3, best.1);
    Ok((best.0, log))
}

pub fn train_mil(cohort: &Cohort, fold: usize, cfg: &MilTrainConfig) -> Result<(MilModel, TrainingLog)> {
    if cohort.task_kind == TaskKind::Survival {
        return Err(Error::InvalidInput("MIL classification needs a labelled cohort".into()));
    }
    let split = cohort.split(fold)?;
    let train = LabelledBags::from_cohort(cohort, &split.train)?;
    let val = LabelledBags::from_cohort(cohort, &split.val)?;
    train_mil_bags(&train, &val, cohort.n_classes(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: Option<usize>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub attention: Vec<f64>,
}

pub fn predict_slides(cohort: &Cohort, indices: &[usize], model: &MilModel) -> Result<Vec<SlidePrediction>> {
    if cohort.dim != model.dim_in() {
        return Err(Error::Shape(format!("cohort dim {} vs model dim {}", cohort.dim, model.dim_in())));
    }
    par_map(indices.len(), |k| {
        let s = &cohort.slides[indices[k]];
        let out = model.bag_forward(&Bag::from_slide(s)?)?;
        let probabilities = crate::numerics::stable_softmax(&out.logits)?;
        Ok(SlidePrediction {
            slide_id: s.slide_id.clone(),
            label: s.label,
            predicted_class: argmax(&probabilities),
            probabilities,
            attention: out.attention,
        })
    })
    .into_iter()
    .collect()
}
