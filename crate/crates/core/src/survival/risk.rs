use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::analysis::{c_index, km_curve, logrank_test, stratify_by_risk_quantile, KmCurve};
use super::cox::{cox_loss, cox_loss_and_grad};
use crate::datastore::{Cohort, SurvivalRecord};
use crate::error::{Error, Result};
use crate::mil::{decode_params, AttentionGrad, Bag, GatedAttention};
use crate::numerics::{adam_step, dot, AdamConfig, AdamState, DenseMatrix, RngStream};
use crate::parallel::par_map;

pub const RISK_MAGIC: &[u8; 4] = b"DGRM";
pub const RISK_VERSION: u32 = 1;

/// Gated attention pooling followed by a linear risk head `θ = rᵀz + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub attention: GatedAttention,
    pub risk_w: Vec<f64>,
    pub risk_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskTrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Each epoch is one full-batch Adam step.
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::patience")]
    pub early_stop_patience: usize,
    pub seed: u64,
    #[serde(default = "defaults::attn_dim")]
    pub attn_dim: usize,
    #[serde(default = "defaults::init_scale")]
    pub weight_init_scale: f64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        1e-2
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn patience() -> usize {
        5
    }
    pub fn attn_dim() -> usize {
        128
    }
    pub fn init_scale() -> f64 {
        1.0
    }
}

impl RiskTrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            epochs: defaults::epochs(),
            early_stop_patience: defaults::patience(),
            seed,
            attn_dim: defaults::attn_dim(),
            weight_init_scale: defaults::init_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.attn_dim == 0 {
            return Err(Error::Config("epochs and attn_dim must be >= 1".into()));
        }
        if !(self.weight_init_scale.is_finite() && self.weight_init_scale > 0.0) {
            return Err(Error::Config(format!("weight_init_scale must be > 0, got {}", self.weight_init_scale)));
        }
        Ok(())
    }
}

impl RiskModel {
    /// Random attention, zero risk head: every bag starts at the same risk
    /// and the first step follows the Cox gradient rather than a random sign.
    pub fn init(dim_in: usize, attn_dim: usize, scale: f64, rng: &mut RngStream) -> Self {
        let attention = GatedAttention::init(dim_in, attn_dim, scale, rng);
        Self { attention, risk_w: vec![0.0; dim_in], risk_b: 0.0 }
    }

    pub fn dim_in(&self) -> usize {
        self.attention.dim_in()
    }

    pub fn is_finite(&self) -> bool {
        self.attention.is_finite() && self.risk_w.iter().all(|x| x.is_finite()) && self.risk_b.is_finite()
    }

    pub fn risk(&self, bag: &Bag) -> Result<f64> {
        let cache = self.attention.forward(bag)?;
        Ok(dot(&self.risk_w, &cache.embedding) + self.risk_b)
    }

    pub fn risks(&self, bags: &[Bag]) -> Result<Vec<f64>> {
        par_map(bags.len(), |i| self.risk(&bags[i])).into_iter().collect()
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.attention.v.as_mut_slice(),
            self.attention.u.as_mut_slice(),
            &mut self.attention.w,
            &mut self.risk_w,
            std::slice::from_mut(&mut self.risk_b),
        ]
    }

    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        p.extend_from_slice(self.attention.v.as_slice());
        p.extend_from_slice(self.attention.u.as_slice());
        p.extend_from_slice(&self.attention.w);
        p.extend_from_slice(&self.risk_w);
        p.push(self.risk_b);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n: usize = self.to_params().len();
        if params.len() != n {
            return Err(Error::Shape(format!("{} parameters for a risk model with {n}", params.len())));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&params[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }

    /// Cox loss over `bags` and its gradient, laid out like [`Self::to_params`].
    pub fn loss_and_grad(&self, bags: &[Bag], records: &[SurvivalRecord]) -> Result<(f64, Vec<f64>)> {
        let caches: Vec<_> = par_map(bags.len(), |i| self.attention.forward(&bags[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        let theta: Vec<f64> = caches.iter().map(|c| dot(&self.risk_w, &c.embedding) + self.risk_b).collect();
        let (loss, dtheta) = cox_loss_and_grad(&theta, records)?;
        let (m, d) = (self.dim_in(), self.attention.attn_dim());
        let mut ga = AttentionGrad::zeros(m, d);
        let mut gr = vec![0.0; m];
        let mut gb = 0.0;
        for (i, cache) in caches.iter().enumerate() {
            let g = dtheta[i];
            if g == 0.0 {
                continue;
            }
            gb += g;
            gr.iter_mut().zip(&cache.embedding).for_each(|(a, z)| *a += g * z);
            self.attention.backward(&bags[i], cache, &self.risk_w, g, &mut ga);
        }
        let mut grad = ga.v.into_vec();
        grad.extend_from_slice(ga.u.as_slice());
        grad.extend_from_slice(&ga.w);
        grad.extend_from_slice(&gr);
        grad.push(gb);
        Ok((loss, grad))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RISK_MAGIC);
        out.extend_from_slice(&RISK_VERSION.to_le_bytes());
        for d in [self.dim_in(), self.attention.attn_dim(), 1] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in self.to_params() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (m, d, c, params) = decode_params(bytes, path, RISK_MAGIC, RISK_VERSION, |m, d, c| 2 * d * m + d + c * m + c)?;
        if c != 1 {
            return Err(Error::InvalidInput(format!("{}: risk model with {c} outputs", path.display())));
        }
        let mut model = Self {
            attention: GatedAttention { v: DenseMatrix::zeros(d, m), u: DenseMatrix::zeros(d, m), w: vec![0.0; d] },
            risk_w: vec![0.0; m],
            risk_b: 0.0,
        };
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Bags with survival outcomes.
pub struct SurvivalBags {
    pub bags: Vec<Bag>,
    pub records: Vec<SurvivalRecord>,
    pub slide_ids: Vec<String>,
}

impl SurvivalBags {
    pub fn from_cohort(cohort: &Cohort, indices: &[usize]) -> Result<Self> {
        let mut out = Self { bags: Vec::new(), records: Vec::new(), slide_ids: Vec::new() };
        for &i in indices {
            let s = &cohort.slides[i];
            let r = s
                .survival
                .ok_or_else(|| Error::InvalidInput(format!("slide {} has no survival record", s.slide_id)))?;
            out.bags.push(Bag::from_slide(s)?);
            out.records.push(r);
            out.slide_ids.push(s.slide_id.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_c_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrainingLog {
    pub epochs: Vec<RiskEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Full-batch Adam on the Cox loss, early stopping on validation C-index
/// (lower validation loss breaks ties).
pub fn train_risk_bags(train: &SurvivalBags, val: &SurvivalBags, cfg: &RiskTrainConfig) -> Result<(RiskModel, RiskTrainingLog)> {
    cfg.validate()?;
    let dim = train.bags.first().ok_or_else(|| Error::InvalidInput("empty training split".into()))?.dim();
    if !train.records.iter().any(|r| r.event) {
        return Err(Error::InvalidInput("training split has no events".into()));
    }
    if val.bags.is_empty() {
        return Err(Error::InvalidInput("empty validation split".into()));
    }
    let root = RngStream::new(cfg.seed, 0x5249_534b); // "RISK"
    let mut model = RiskModel::init(dim, cfg.attn_dim, cfg.weight_init_scale, &mut root.derive(0));
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let n_params = model.to_params().len();
    let mut state = AdamState::new(n_params);
    let mut best = (model.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut log = RiskTrainingLog { epochs: Vec::new(), best_epoch: 0, stopped_early: false };
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let (train_loss, grad) = model.loss_and_grad(&train.bags, &train.records)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("Cox loss at epoch {epoch}")));
        }
        let mut p = model.to_params();
        adam_step(&mut p, &grad, &mut state, &adam)?;
        model.set_params(&p)?;
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("risk model parameters at epoch {epoch}")));
        }

        let theta = model.risks(&val.bags)?;
        let val_loss = cox_loss(&theta, &val.records)?;
        let val_c = c_index(&theta, &val.records)?;
        debug!("risk epoch {epoch}: train {train_loss:.5} val {val_loss:.5} c {val_c:.4}");
        log.epochs.push(RiskEpoch { epoch, train_loss, val_loss, val_c_index: val_c });
        if val_c > best.1 || (val_c == best.1 && val_loss < best.2) {
            best = (model.clone(), val_c, val_loss, epoch);
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
    info!("risk model kept epoch {} (val C-index {:.4})", best.3, best.1);
    Ok((best.0, log))
}

pub fn train_risk_model(cohort: &Cohort, fold: usize, cfg: &RiskTrainConfig) -> Result<(RiskModel, RiskTrainingLog)> {
    let split = cohort.split(fold)?;
    let train = SurvivalBags::from_cohort(cohort, &split.train)?;
    let val = SurvivalBags::from_cohort(cohort, &split.val)?;
    train_risk_bags(&train, &val, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSizes {
    pub low: usize,
    pub high: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub c_index: f64,
    pub logrank_chi2: f64,
    pub logrank_p: f64,
    pub group_sizes: GroupSizes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalEvaluation {
    pub report: SurvivalReport,
    pub km_low: KmCurve,
    pub km_high: KmCurve,
    pub theta: Vec<f64>,
}

/// C-index plus a quantile split of the risk scores compared by log-rank.
pub fn evaluate_risk(theta: &[f64], records: &[SurvivalRecord], quantile: f64) -> Result<SurvivalEvaluation> {
    let c = c_index(theta, records)?;
    let strata = stratify_by_risk_quantile(theta, quantile)?;
    let low: Vec<SurvivalRecord> = strata.low.iter().map(|&i| records[i]).collect();
    let high: Vec<SurvivalRecord> = strata.high.iter().map(|&i| records[i]).collect();
    let lr = logrank_test(&low, &high)?;
    Ok(SurvivalEvaluation {
        report: SurvivalReport {
            c_index: c,
            logrank_chi2: lr.chi2,
            logrank_p: lr.p_value,
            group_sizes: GroupSizes { low: low.len(), high: high.len() },
        },
        km_low: km_curve(&low)?,
        km_high: km_curve(&high)?,
        theta: theta.to_vec(),
    })
}
