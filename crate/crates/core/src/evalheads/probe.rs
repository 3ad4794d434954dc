use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lbfgs_minimize, log_sum_exp, DenseMatrix, LbfgsOptions};

pub const PROBE_MAX_ITERATIONS: usize = 1000;

/// How `100/M × C` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// `(100 / M) · C`
    #[default]
    Literal,
    /// `100 / (M · C)`
    PerClass,
}

pub fn probe_lambda(dim: usize, n_classes: usize) -> Result<f64> {
    probe_lambda_with(dim, n_classes, LambdaRule::Literal)
}

pub fn probe_lambda_with(dim: usize, n_classes: usize, rule: LambdaRule) -> Result<f64> {
    if dim == 0 || n_classes == 0 {
        return Err(Error::InvalidInput(format!("probe lambda needs M, C >= 1 (got {dim}, {n_classes})")));
    }
    Ok(match rule {
        LambdaRule::Literal => 100.0 / dim as f64 * n_classes as f64,
        LambdaRule::PerClass => 100.0 / (dim as f64 * n_classes as f64),
    })
}

/// Multinomial logistic regression on fixed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// C×M
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut l = self.weights.matvec(x);
        l.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        l
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.weights.cols() {
            return Err(Error::Shape(format!("feature dim {} vs probe dim {}", x.len(), self.weights.cols())));
        }
        crate::numerics::stable_softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::numerics::argmax(&self.predict_proba(x)?))
    }
}

/// Mean cross-entropy plus `(λ/2)‖W‖²` over parameters laid out as
/// `[W (C×M, row-major), b (C)]`; writes the gradient into `grad`.
pub fn probe_objective(x: &DenseMatrix, labels: &[usize], n_classes: usize, lambda: f64, params: &[f64], grad: &mut [f64]) -> f64 {
    let (n, m) = x.shape();
    let (w, b) = params.split_at(n_classes * m);
    let (gw, gb) = grad.split_at_mut(n_classes * m);
    gw.iter_mut().zip(w).for_each(|(g, w)| *g = lambda * w);
    gb.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; n_classes];
    for i in 0..n {
        let xi = x.row(i);
        for c in 0..n_classes {
            logits[c] = b[c] + crate::numerics::dot(&w[c * m..(c + 1) * m], xi);
        }
        let lse = log_sum_exp(&logits).unwrap_or(f64::NAN);
        loss += lse - logits[labels[i]];
        for c in 0..n_classes {
            let y = if c == labels[i] { 1.0 } else { 0.0 };
            let d = ((logits[c] - lse).exp() - y) * inv_n;
            gb[c] += d;
            crate::numerics::axpy(d, xi, &mut gw[c * m..(c + 1) * m]);
        }
    }
    loss * inv_n + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

fn check_inputs(x: &DenseMatrix, labels: &[usize], n_classes: usize) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows vs {} labels", x.rows(), labels.len())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!("label {l} with {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidInput("linear probe needs at least 2 classes present".into()));
    }
    Ok(())
}

/// Fits the probe with L-BFGS from zero weights.
pub fn fit_linear_probe(x: &DenseMatrix, labels: &[usize], n_classes: usize, lambda: f64, max_iterations: usize) -> Result<LinearProbe> {
    check_inputs(x, labels, n_classes)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidInput(format!("probe lambda must be > 0, got {lambda}")));
    }
    let m = x.cols();
    let mut f = |p: &[f64], g: &mut [f64]| probe_objective(x, labels, n_classes, lambda, p, g);
    let opts = LbfgsOptions::new(max_iterations, 1e-9);
    let res = lbfgs_minimize(&mut f, &vec![0.0; n_classes * (m + 1)], &opts)?;
    let (w, b) = res.x.split_at(n_classes * m);
    Ok(LinearProbe {
        weights: DenseMatrix::new(n_classes, m, w.to_vec())?,
        bias: b.to_vec(),
        lambda,
        converged: res.converged,
        iterations: res.iterations,
        objective: res.value,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{gradient_check, RngStream};

    /// Plain gradient descent with step `1/L`, `L = λ + max_i(‖x_i‖² + 1)/2`.
    pub(crate) fn gd_oracle(x: &DenseMatrix, labels: &[usize], c: usize, lambda: f64, steps: usize) -> f64 {
        let lip = lambda + 0.5 * (0..x.rows()).map(|i| 1.0 + x.row(i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let mut p = vec![0.0; c * (x.cols() + 1)];
        let mut g = vec![0.0; p.len()];
        for _ in 0..steps {
            probe_objective(x, labels, c, lambda, &p, &mut g);
            p.iter_mut().zip(&g).for_each(|(p, g)| *p -= g / lip);
        }
        probe_objective(x, labels, c, lambda, &p, &mut g)
    }

    pub(crate) fn random_problem(rng: &mut RngStream, n: usize, m: usize, c: usize) -> (DenseMatrix, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let data = (0..n * m)
            .map(|k| rng.standard_normal() + if k % m == labels[k / m] % m { 1.0 } else { 0.0 })
            .collect();
        (DenseMatrix::new(n, m, data).unwrap(), labels)
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(probe_lambda(100, 1).unwrap(), 1.0);
        assert_eq!(probe_lambda(1024, 11).unwrap(), 1.07421875);
        assert_eq!(probe_lambda(512, 9).unwrap(), 1.7578125);
        assert_eq!(probe_lambda_with(100, 4, LambdaRule::PerClass).unwrap(), 0.25);
        assert!(probe_lambda(0, 2).is_err());
    }

    #[test]
    fn gradient_is_exact() {
        let mut rng = RngStream::new(1, 0);
        let (x, y) = random_problem(&mut rng, 20, 4, 3);
        let p: Vec<f64> = (0..15).map(|_| rng.standard_normal()).collect();
        let err = gradient_check(|p, g| probe_objective(&x, &y, 3, 0.3, p, g), &p, 1e-6).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn separable_data_fits_perfectly() {
        let pts = [[0.0, 0.0], [0.5, 1.0], [1.0, 0.2], [3.0, 3.0], [3.5, 2.5], [4.0, 4.0]];
        let x = DenseMatrix::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let probe = fit_linear_probe(&x, &y, 2, 1e-6, PROBE_MAX_ITERATIONS).unwrap();
        for (p, &l) in pts.iter().zip(&y) {
            assert_eq!(probe.predict(p).unwrap(), l);
        }
    }

    #[test]
    fn huge_lambda_gives_priors() {
        let mut rng = RngStream::new(2, 0);
        let (x, mut y) = random_problem(&mut rng, 40, 3, 2);
        y[0] = 1; // priors 0.475 / 0.525
        let probe = fit_linear_probe(&x, &y, 2, 1e6, PROBE_MAX_ITERATIONS).unwrap();
        assert!(probe.weights.as_slice().iter().all(|w| w.abs() <= 1e-3));
        let p = probe.predict_proba(x.row(3)).unwrap();
        assert!((p[1] - 21.0 / 40.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..3 {
            let (x, y) = random_problem(&mut rng, 50, 4, 3);
            let probe = fit_linear_probe(&x, &y, 3, 0.05, PROBE_MAX_ITERATIONS).unwrap();
            let oracle = gd_oracle(&x, &y, 3, 0.05, 200_000);
            assert!((probe.objective - oracle).abs() <= 1e-6, "{} vs {oracle}", probe.objective);
        }
    }

    #[test]
    fn no_restart_does_better() {
        let mut rng = RngStream::new(4, 0);
        let (x, y) = random_problem(&mut rng, 30, 3, 2);
        let probe = fit_linear_probe(&x, &y, 2, 0.1, PROBE_MAX_ITERATIONS).unwrap();
        for r in 0..10 {
            let mut start = RngStream::new(40, r);
            let x0: Vec<f64> = (0..8).map(|_| 3.0 * start.standard_normal()).collect();
            let mut f = |p: &[f64], g: &mut [f64]| probe_objective(&x, &y, 2, 0.1, p, g);
            let res = lbfgs_minimize(&mut f, &x0, &LbfgsOptions::new(PROBE_MAX_ITERATIONS, 1e-9)).unwrap();
            assert!(probe.objective <= res.value + 1e-8);
        }
    }

    #[test]
    fn input_errors() {
        let x = DenseMatrix::zeros(3, 2);
        assert!(fit_linear_probe(&x, &[0, 0, 0], 2, 1.0, 10).is_err());
        assert!(fit_linear_probe(&x, &[0, 1], 2, 1.0, 10).is_err());
        assert!(fit_linear_probe(&x, &[0, 1, 0], 2, 0.0, 10).is_err());
    }
}
