use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, AttentionGrad, Bag, GatedAttention};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, stable_softmax, DenseMatrix, RngStream};

pub const MODEL_MAGIC: &[u8; 4] = b"DGMM";
pub const MODEL_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Gated-attention MIL classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    pub attention: GatedAttention,
    /// C×M
    pub w_cls: DenseMatrix,
    pub b_cls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilGrad {
    pub attention: AttentionGrad,
    pub w_cls: DenseMatrix,
    pub b_cls: Vec<f64>,
}

impl MilGrad {
    pub fn zeros(model: &MilModel) -> Self {
        Self {
            attention: AttentionGrad::zeros(model.dim_in(), model.attn_dim()),
            w_cls: DenseMatrix::zeros(model.n_classes(), model.dim_in()),
            b_cls: vec![0.0; model.n_classes()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.attention.v.as_slice(),
            self.attention.u.as_slice(),
            &self.attention.w,
            self.w_cls.as_slice(),
            &self.b_cls,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl MilModel {
    pub fn init(dim_in: usize, attn_dim: usize, n_classes: usize, scale: f64, rng: &mut RngStream) -> Result<Self> {
        if dim_in == 0 || attn_dim == 0 || n_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "MIL model needs M, D >= 1 and C >= 2 (got {dim_in}, {attn_dim}, {n_classes})"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidInput(format!("weight init scale {scale}")));
        }
        let attention = GatedAttention::init(dim_in, attn_dim, scale, rng);
        let s = scale / (dim_in as f64).sqrt();
        let w = (0..n_classes * dim_in).map(|_| s * (2.0 * rng.uniform() - 1.0)).collect();
        Ok(Self {
            attention,
            w_cls: DenseMatrix::new(n_classes, dim_in, w)?,
            b_cls: vec![0.0; n_classes],
        })
    }

    pub fn dim_in(&self) -> usize {
        self.attention.dim_in()
    }

    pub fn attn_dim(&self) -> usize {
        self.attention.attn_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.w_cls.rows()
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.attention.v.as_slice(),
            self.attention.u.as_slice(),
            &self.attention.w,
            self.w_cls.as_slice(),
            &self.b_cls,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.attention.v.as_mut_slice(),
            self.attention.u.as_mut_slice(),
            &mut self.attention.w,
            self.w_cls.as_mut_slice(),
            &mut self.b_cls,
        ]
    }

    /// All parameters in declaration order.
    pub fn to_params(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!("{} parameters for a model with {}", params.len(), self.n_params())));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&params[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn attention_weights(&self, bag: &Bag) -> Result<Vec<f64>> {
        Ok(self.attention.forward(bag)?.weights)
    }

    fn head(&self, cache: AttentionCache) -> BagOutput {
        let mut logits = self.w_cls.matvec(&cache.embedding);
        logits.iter_mut().zip(&self.b_cls).for_each(|(l, b)| *l += b);
        BagOutput { logits, attention: cache.weights, embedding: cache.embedding }
    }

    pub fn bag_forward(&self, bag: &Bag) -> Result<BagOutput> {
        Ok(self.head(self.attention.forward(bag)?))
    }

    pub fn predict_proba(&self, bag: &Bag) -> Result<Vec<f64>> {
        stable_softmax(&self.bag_forward(bag)?.logits)
    }

    /// Classifier head applied to each patch on its own; used as a patch
    /// level probability estimate.
    pub fn patch_probabilities(&self, bag: &Bag) -> Result<Vec<Vec<f64>>> {
        if bag.dim() != self.dim_in() {
            return Err(Error::Shape(format!("bag dim {} vs model dim {}", bag.dim(), self.dim_in())));
        }
        (0..bag.len())
            .map(|k| {
                let mut l = self.w_cls.matvec(bag.h.row(k));
                l.iter_mut().zip(&self.b_cls).for_each(|(a, b)| *a += b);
                stable_softmax(&l)
            })
            .collect()
    }

    /// Cross-entropy of one bag; adds `scale · ∇` into `grad`.
    pub fn loss_and_grad(&self, bag: &Bag, label: usize, scale: f64, grad: &mut MilGrad) -> Result<f64> {
        if label >= self.n_classes() {
            return Err(Error::InvalidInput(format!("label {label} with {} classes", self.n_classes())));
        }
        let cache = self.attention.forward(bag)?;
        let mut logits = self.w_cls.matvec(&cache.embedding);
        logits.iter_mut().zip(&self.b_cls).for_each(|(l, b)| *l += b);
        let loss = log_sum_exp(&logits)? - logits[label];
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        let mut delta = stable_softmax(&logits)?;
        delta[label] -= 1.0;
        grad.w_cls.add_outer(scale, &delta, &cache.embedding);
        grad.b_cls.iter_mut().zip(&delta).for_each(|(g, d)| *g += scale * d);
        let dz = self.w_cls.t_matvec(&delta);
        self.attention.backward(bag, &cache, &dz, scale, &mut grad.attention);
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.n_params());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for d in [self.dim_in(), self.attn_dim(), self.n_classes()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for b in self.blocks() {
            for x in b {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (m, d, c, params) = decode_params(bytes, path, MODEL_MAGIC, MODEL_VERSION, |m, d, c| {
            2 * d * m + d + c * m + c
        })?;
        let mut model = Self {
            attention: GatedAttention {
                v: DenseMatrix::zeros(d, m),
                u: DenseMatrix::zeros(d, m),
                w: vec![0.0; d],
            },
            w_cls: DenseMatrix::zeros(c, m),
            b_cls: vec![0.0; c],
        };
        model.set_params(&params)?;
        if c < 2 {
            return Err(Error::InvalidInput(format!("{}: model with {c} classes", path.display())));
        }
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

/// Shared decoder for the `magic, version, M, D, C, f64...` model layout.
pub(crate) fn decode_params(
    bytes: &[u8],
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    n_params: impl Fn(u128, u128, u128) -> u128,
) -> Result<(usize, usize, usize, Vec<f64>)> {
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.into(), expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path.into(), expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let found = u32_at(4);
    if found != version {
        return Err(Error::VersionMismatch { path: path.into(), expected: version, found });
    }
    let (m, d, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if m == 0 || d == 0 || c == 0 {
        return Err(Error::InvalidInput(format!("{}: zero model dimension ({m}, {d}, {c})", path.display())));
    }
    // u128 so absurd header dimensions cannot overflow
    let expected = HEADER_LEN as u128 + 8 * n_params(m as u128, d as u128, c as u128);
    let expected = u64::try_from(expected).unwrap_or(u64::MAX);
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { path: path.into(), expected, actual });
    }
    if actual > expected {
        return Err(Error::InvalidInput(format!(
            "{}: {} trailing bytes after model parameters",
            path.display(),
            actual - expected
        )));
    }
    let params: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("{}: parameter {i}", path.display())));
    }
    Ok((m, d, c, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;

    fn random_bag(rng: &mut RngStream, n: usize, m: usize) -> Bag {
        let data = (0..n * m).map(|_| rng.standard_normal()).collect();
        Bag::new(DenseMatrix::new(n, m, data).unwrap()).unwrap()
    }

    fn model(seed: u64, m: usize, d: usize, c: usize) -> MilModel {
        let mut rng = RngStream::new(seed, 0);
        let mut mdl = MilModel::init(m, d, c, 1.5, &mut rng).unwrap();
        mdl.b_cls.iter_mut().for_each(|b| *b = rng.standard_normal());
        mdl
    }

    #[test]
    fn trivial_bags() {
        let mdl = model(1, 4, 6, 2);
        let one = Bag::new(DenseMatrix::new(1, 4, vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        let out = mdl.bag_forward(&one).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        assert_eq!(out.embedding, vec![0.5, -1.0, 2.0, 0.25]);
        let twin = Bag::new(DenseMatrix::new(2, 4, vec![0.5, -1.0, 2.0, 0.25, 0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        assert_eq!(mdl.attention_weights(&twin).unwrap(), vec![0.5, 0.5]);
        assert!(Bag::new(DenseMatrix::zeros(0, 4)).is_err());
        let wrong = Bag::new(DenseMatrix::zeros(2, 3)).unwrap();
        assert!(matches!(mdl.bag_forward(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_step_by_step_formula() {
        let mut rng = RngStream::new(2, 0);
        for trial in 0..20 {
            let mdl = model(100 + trial, 5, 7, 3);
            let bag = random_bag(&mut rng, 3, 5);
            // explicit evaluation, one scalar at a time
            let mut e = [0.0; 3];
            for k in 0..3 {
                for j in 0..7 {
                    let (mut vh, mut uh) = (0.0, 0.0);
                    for i in 0..5 {
                        vh += mdl.attention.v.get(j, i) * bag.h.get(k, i);
                        uh += mdl.attention.u.get(j, i) * bag.h.get(k, i);
                    }
                    e[k] += mdl.attention.w[j] * vh.tanh() * (1.0 / (1.0 + (-uh).exp()));
                }
            }
            let total: f64 = e.iter().map(|x| x.exp()).sum();
            let a: Vec<f64> = e.iter().map(|x| x.exp() / total).collect();
            let out = mdl.bag_forward(&bag).unwrap();
            for k in 0..3 {
                assert!((out.attention[k] - a[k]).abs() <= 1e-10);
            }
            for c in 0..3 {
                let mut l = mdl.b_cls[c];
                for i in 0..5 {
                    let z: f64 = (0..3).map(|k| a[k] * bag.h.get(k, i)).sum();
                    l += mdl.w_cls.get(c, i) * z;
                }
                assert!((out.logits[c] - l).abs() <= 1e-10);
            }
            assert!((out.attention.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(out.attention.iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn permutation_invariant_bitwise() {
        let mdl = model(3, 6, 8, 2);
        let mut rng = RngStream::new(3, 1);
        for _ in 0..20 {
            let n = 2 + rng.below(30);
            let bag = random_bag(&mut rng, n, 6);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&k| bag.h.row(k).to_vec()).collect();
            let permuted = Bag::new(DenseMatrix::from_rows(&rows).unwrap()).unwrap();
            let a = mdl.bag_forward(&bag).unwrap();
            let b = mdl.bag_forward(&permuted).unwrap();
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.embedding, b.embedding);
            for (i, &k) in perm.iter().enumerate() {
                assert_eq!(b.attention[i], a.attention[k]);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(4, 0);
        for trial in 0..10 {
            let (m, d, c) = (3 + rng.below(4), 2 + rng.below(5), 2 + rng.below(3));
            let base = model(200 + trial, m, d, c);
            let n = 1 + rng.below(6);
            let bag = random_bag(&mut rng, n, m);
            let label = rng.below(c);
            let err = gradient_check(
                |x, g| {
                    let mut mdl = base.clone();
                    mdl.set_params(x).unwrap();
                    let mut grad = MilGrad::zeros(&mdl);
                    let l = mdl.loss_and_grad(&bag, label, 1.0, &mut grad).unwrap();
                    g.copy_from_slice(&grad.blocks().concat());
                    l
                },
                &base.to_params(),
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "trial {trial}: {err}");
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut mdl = model(5, 4, 3, 3);
        mdl.w_cls = DenseMatrix::zeros(3, 4);
        mdl.b_cls = vec![0.0; 3];
        let bag = random_bag(&mut RngStream::new(5, 5), 7, 4);
        let p = mdl.predict_proba(&bag).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let mdl = model(6, 5, 4, 3);
        let bytes = mdl.to_bytes();
        let p = Path::new("m.dgmm");
        let back = MilModel::from_bytes(&bytes, p).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, mdl);
        assert!(matches!(MilModel::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        assert!(matches!(MilModel::from_bytes(&bytes[..10], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MilModel::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(MilModel::from_bytes(&bad, p), Err(Error::VersionMismatch { found: 9, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(MilModel::from_bytes(&long, p), Err(Error::InvalidInput(_))));
        let mut nan = bytes;
        let off = nan.len() - 8;
        nan[off..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(MilModel::from_bytes(&nan, p), Err(Error::NonFinite(_))));
    }
}
