use serde::{Deserialize, Serialize};

use crate::datastore::SlideBag;
use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid, DenseMatrix, RngStream};

/// A bag of patch features plus a canonical patch order.
///
/// Every reduction over patches runs in the canonical order (rows sorted
/// lexicographically), so results do not depend on how patches were listed.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub h: DenseMatrix,
    order: Vec<usize>,
}

impl Bag {
    pub fn new(h: DenseMatrix) -> Result<Self> {
        if h.rows() == 0 {
            return Err(Error::InvalidInput("empty bag".into()));
        }
        let mut order: Vec<usize> = (0..h.rows()).collect();
        order.sort_by(|&a, &b| {
            h.row(a)
                .iter()
                .zip(h.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(Self { h, order })
    }

    pub fn from_slide(slide: &SlideBag) -> Result<Self> {
        Self::new(slide.feature_matrix())
    }

    pub fn len(&self) -> usize {
        self.h.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h.cols()
    }
}

/// `a_k = softmax_k(wᵀ(tanh(V h_k) ⊙ σ(U h_k)))`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedAttention {
    pub v: DenseMatrix,
    pub u: DenseMatrix,
    pub w: Vec<f64>,
}

/// Intermediate values kept for the backward pass, indexed by patch.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub tanh: Vec<Vec<f64>>,
    pub gate: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub v: DenseMatrix,
    pub u: DenseMatrix,
    pub w: Vec<f64>,
}

impl AttentionGrad {
    pub fn zeros(dim_in: usize, attn_dim: usize) -> Self {
        Self {
            v: DenseMatrix::zeros(attn_dim, dim_in),
            u: DenseMatrix::zeros(attn_dim, dim_in),
            w: vec![0.0; attn_dim],
        }
    }
}

impl GatedAttention {
    /// Uniform init in `[-s, s]`, `s = scale/√M` for `V`, `U` and `scale/√D` for `w`.
    pub fn init(dim_in: usize, attn_dim: usize, scale: f64, rng: &mut RngStream) -> Self {
        let s_in = scale / (dim_in as f64).sqrt();
        let s_attn = scale / (attn_dim as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * (2.0 * rng.uniform() - 1.0)).collect() };
        let v = draw(attn_dim * dim_in, s_in);
        let u = draw(attn_dim * dim_in, s_in);
        let w = draw(attn_dim, s_attn);
        Self {
            v: DenseMatrix::new(attn_dim, dim_in, v).expect("shape"),
            u: DenseMatrix::new(attn_dim, dim_in, u).expect("shape"),
            w,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.v.cols()
    }

    pub fn attn_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.u.is_finite() && self.w.iter().all(|x| x.is_finite())
    }

    fn check(&self, bag: &Bag) -> Result<()> {
        if bag.dim() != self.dim_in() {
            return Err(Error::Shape(format!("bag dim {} vs model dim {}", bag.dim(), self.dim_in())));
        }
        Ok(())
    }

    pub fn forward(&self, bag: &Bag) -> Result<AttentionCache> {
        self.check(bag)?;
        let (n, d) = (bag.len(), self.attn_dim());
        let mut tanh = Vec::with_capacity(n);
        let mut gate = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut buf = vec![0.0; d];
        for k in 0..n {
            let h = bag.h.row(k);
            self.v.matvec_into(h, &mut buf);
            let t: Vec<f64> = buf.iter().map(|x| x.tanh()).collect();
            self.u.matvec_into(h, &mut buf);
            let s: Vec<f64> = buf.iter().map(|&x| sigmoid(x)).collect();
            logits.push(t.iter().zip(&s).zip(&self.w).map(|((a, b), c)| a * b * c).sum::<f64>());
            tanh.push(t);
            gate.push(s);
        }

        // softmax and weighted sum in canonical order
        let max = bag.order.iter().map(|&k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut weights = vec![0.0; n];
        let mut total = 0.0;
        for &k in &bag.order {
            weights[k] = (logits[k] - max).exp();
            total += weights[k];
        }
        weights.iter_mut().for_each(|a| *a /= total);
        let mut embedding = vec![0.0; self.dim_in()];
        for &k in &bag.order {
            let a = weights[k];
            for (z, &x) in embedding.iter_mut().zip(bag.h.row(k)) {
                *z += a * x;
            }
        }
        if !embedding.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite("bag embedding".into()));
        }
        Ok(AttentionCache { tanh, gate, weights, embedding })
    }

    /// Accumulates `scale · ∂(dz · z)/∂params` into `grad`.
    pub fn backward(&self, bag: &Bag, cache: &AttentionCache, dz: &[f64], scale: f64, grad: &mut AttentionGrad) {
        let n = bag.len();
        let da: Vec<f64> = (0..n).map(|k| dot(dz, bag.h.row(k))).collect();
        let mean_da: f64 = bag.order.iter().map(|&k| cache.weights[k] * da[k]).sum();
        let mut pre_v = vec![0.0; self.attn_dim()];
        let mut pre_u = vec![0.0; self.attn_dim()];
        for &k in &bag.order {
            let de = scale * cache.weights[k] * (da[k] - mean_da);
            if de == 0.0 {
                continue;
            }
            let (t, s) = (&cache.tanh[k], &cache.gate[k]);
            for j in 0..self.attn_dim() {
                grad.w[j] += de * t[j] * s[j];
                pre_v[j] = de * self.w[j] * s[j] * (1.0 - t[j] * t[j]);
                pre_u[j] = de * self.w[j] * t[j] * s[j] * (1.0 - s[j]);
            }
            grad.v.add_outer(1.0, &pre_v, bag.h.row(k));
            grad.u.add_outer(1.0, &pre_u, bag.h.row(k));
        }
    }
}
