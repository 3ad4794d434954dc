//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use log::debug;

use super::matrix::{axpy, dot, norm2, norm_inf};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    /// Convergence when the gradient's max-norm falls to this value.
    pub gradient_tolerance: f64,
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evals: 40,
        }
    }
}

impl LbfgsOptions {
    pub fn new(max_iterations: usize, gradient_tolerance: f64) -> Self {
        Self {
            max_iterations,
            gradient_tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_inf_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Iterations where the line search failed and a steepest-descent step
    /// was taken instead.
    pub fallback_steps: usize,
    pub evaluations: usize,
}

/// An objective evaluated as `f(x)` with its gradient written into `grad`.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

struct Evaluator<'a, O: Objective> {
    objective: &'a mut O,
    count: usize,
}

impl<O: Objective> Evaluator<'_, O> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.count += 1;
        let f = self.objective.evaluate(x, grad);
        if !f.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned {f} at evaluation {}",
                self.count
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient component {i} is {} at evaluation {}",
                grad[i], self.count
            )));
        }
        Ok(f)
    }
}

/// A point on the search ray: step length, value, gradient and directional
/// derivative.
#[derive(Clone)]
struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

/// Minimise `objective` from `x0`.
///
/// Returns the last iterate when `max_iterations` is exhausted, with
/// `converged = false`. Non-finite values abort with [`Error::NonFinite`].
pub fn lbfgs_minimize<O: Objective>(
    objective: &mut O,
    x0: &[f64],
    options: &LbfgsOptions,
) -> Result<LbfgsResult> {
    let n = x0.len();
    let mut ev = Evaluator {
        objective,
        count: 0,
    };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = ev.eval(&x, &mut g)?;

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(options.memory);
    let mut fallback_steps = 0;
    let mut iterations = 0;
    let mut converged = norm_inf(&g) <= options.gradient_tolerance;

    while !converged && iterations < options.max_iterations {
        iterations += 1;

        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / norm2(&g)).min(1.0)
        } else {
            1.0
        };

        let accepted = match line_search(&mut ev, &x, f, &g, &d, slope, alpha0, options)? {
            Some(t) => Some(refine(&mut ev, &x, f, &d, slope, t, options)?),
            None => {
                fallback_steps += 1;
                history.clear();
                debug!("line search failed at iteration {iterations}; steepest-descent fallback");
                steepest_descent_step(&mut ev, &x, f, &g, options.c1)?
            }
        };
        let Some(trial) = accepted else {
            debug!("no decrease along the negative gradient; stopping at iteration {iterations}");
            break;
        };

        let step_dir = if trial.slope.is_nan() {
            // steepest-descent fallback: the step was taken along -g
            g.iter().map(|v| -v).collect::<Vec<_>>()
        } else {
            d
        };
        let mut x_new = x.clone();
        axpy(trial.alpha, &step_dir, &mut x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) && sy > 0.0 {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        x = x_new;
        f = trial.f;
        g = trial.g;
        converged = norm_inf(&g) <= options.gradient_tolerance;
    }

    Ok(LbfgsResult {
        gradient_inf_norm: norm_inf(&g),
        x,
        value: f,
        converged,
        iterations,
        fallback_steps,
        evaluations: ev.count,
    })
}

/// Two-loop recursion: returns `-H g`.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[allow(clippy::too_many_arguments)]
fn line_search<O: Objective>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    slope0: f64,
    alpha_init: f64,
    opt: &LbfgsOptions,
) -> Result<Option<Trial>> {
    let n = x.len();
    let mut xt = vec![0.0; n];
    let mut probe = |ev: &mut Evaluator<'_, O>, alpha: f64| -> Result<Trial> {
        xt.copy_from_slice(x);
        axpy(alpha, d, &mut xt);
        let mut g = vec![0.0; n];
        let f = ev.eval(&xt, &mut g)?;
        let slope = dot(&g, d);
        Ok(Trial { alpha, f, g, slope })
    };

    let armijo = |t: &Trial| t.f <= f0 + opt.c1 * t.alpha * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -opt.c2 * slope0;

    let mut prev = Trial {
        alpha: 0.0,
        f: f0,
        g: g0.to_vec(),
        slope: slope0,
    };
    let mut alpha = alpha_init;
    let mut evals = 0;
    let alpha_max = 1e10;
    loop {
        if evals >= opt.max_line_search_evals {
            return Ok(None);
        }
        let cur = probe(ev, alpha)?;
        evals += 1;
        if !armijo(&cur) || (evals > 1 && cur.f >= prev.f) {
            return zoom(ev, &mut probe, prev, cur, f0, slope0, opt, evals);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(ev, &mut probe, cur, prev, f0, slope0, opt, evals);
        }
        prev = cur;
        alpha = (2.0 * alpha).min(alpha_max);
        if prev.alpha >= alpha_max {
            return Ok(None);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<O: Objective, P>(
    ev: &mut Evaluator<'_, O>,
    probe: &mut P,
    mut lo: Trial,
    mut hi: Trial,
    f0: f64,
    slope0: f64,
    opt: &LbfgsOptions,
    mut evals: usize,
) -> Result<Option<Trial>>
where
    P: FnMut(&mut Evaluator<'_, O>, f64) -> Result<Trial>,
{
    while evals < opt.max_line_search_evals {
        let width = hi.alpha - lo.alpha;
        if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
            break;
        }
        let mut alpha = cubic_minimizer(&lo, &hi).unwrap_or(lo.alpha + 0.5 * width);
        let (a, b) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (b - a);
        if !(alpha > a + margin && alpha < b - margin) {
            alpha = lo.alpha + 0.5 * width;
        }
        let cur = probe(ev, alpha)?;
        evals += 1;
        if cur.f > f0 + opt.c1 * cur.alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -opt.c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Accept the best sufficient-decrease point seen if it makes progress.
    if lo.alpha > 0.0 && lo.f < f0 {
        return Ok(Some(lo));
    }
    Ok(None)
}

/// One extra probe at the minimiser of the cubic through the origin and the
/// accepted step. Exact on quadratics, which restores the finite-termination
/// behaviour of exact line searches. Kept only if it still satisfies the
/// strong Wolfe conditions and lowers the value.
fn refine<O: Objective>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    d: &[f64],
    slope0: f64,
    accepted: Trial,
    opt: &LbfgsOptions,
) -> Result<Trial> {
    let origin = Trial {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let Some(alpha) = cubic_minimizer(&origin, &accepted) else {
        return Ok(accepted);
    };
    if !(alpha > 0.0) || (alpha - accepted.alpha).abs() <= 1e-6 * accepted.alpha {
        return Ok(accepted);
    }
    let mut xt = x.to_vec();
    axpy(alpha, d, &mut xt);
    let mut g = vec![0.0; x.len()];
    let f = ev.eval(&xt, &mut g)?;
    let slope = dot(&g, d);
    let wolfe = f <= f0 + opt.c1 * alpha * slope0 && slope.abs() <= -opt.c2 * slope0;
    if wolfe && f < accepted.f {
        Ok(Trial { alpha, f, g, slope })
    } else {
        Ok(accepted)
    }
}

/// Minimiser of the cubic interpolating value and slope at both ends.
fn cubic_minimizer(a: &Trial, b: &Trial) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

/// Backtracking Armijo step along `-g`. The returned trial has a NaN slope
/// to mark it as a fallback step.
fn steepest_descent_step<O: Objective>(
    ev: &mut Evaluator<'_, O>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    c1: f64,
) -> Result<Option<Trial>> {
    let gn2 = dot(g0, g0);
    if gn2 == 0.0 {
        return Ok(None);
    }
    let mut alpha = 1.0 / gn2.sqrt();
    let mut xt = vec![0.0; x.len()];
    for _ in 0..60 {
        xt.copy_from_slice(x);
        axpy(-alpha, g0, &mut xt);
        let mut g = vec![0.0; x.len()];
        let f = ev.eval(&xt, &mut g)?;
        if f <= f0 - c1 * alpha * gn2 && f < f0 {
            return Ok(Some(Trial {
                alpha,
                f,
                g,
                slope: f64::NAN,
            }));
        }
        alpha *= 0.5;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
        move |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..x.len() {
                let r = x[i] - c[i];
                f += r * r;
                g[i] = 2.0 * r;
            }
            f
        }
    }

    #[test]
    fn shifted_quadratic() {
        let c = vec![1.5, -2.0, 3.25, 0.0, 7.0];
        let mut obj = quadratic(c.clone());
        let r = lbfgs_minimize(&mut obj, &[0.0; 5], &LbfgsOptions::new(100, 1e-10)).unwrap();
        assert!(r.converged);
        for (a, b) in r.x.iter().zip(&c) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn rosenbrock() {
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = lbfgs_minimize(&mut obj, &[-1.2, 1.0], &LbfgsOptions::new(1000, 1e-10)).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() <= 1e-5 && (r.x[1] - 1.0).abs() <= 1e-5, "{:?}", r.x);
    }

    #[test]
    fn positive_definite_quadratics_converge_quickly() {
        let mut rng = RngStream::new(99, 0);
        for dim in [2usize, 3, 5, 8, 10] {
            for _ in 0..20 {
                // A = Bᵀ B + I, b random.
                let bm: Vec<f64> = (0..dim * dim).map(|_| rng.standard_normal()).collect();
                let mut a = vec![0.0; dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        let mut s = if i == j { 1.0 } else { 0.0 };
                        for k in 0..dim {
                            s += bm[k * dim + i] * bm[k * dim + j];
                        }
                        a[i * dim + j] = s;
                    }
                }
                let b: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
                let mut obj = |x: &[f64], g: &mut [f64]| {
                    let mut f = 0.0;
                    for i in 0..dim {
                        let ax: f64 = (0..dim).map(|j| a[i * dim + j] * x[j]).sum();
                        g[i] = ax - b[i];
                        f += 0.5 * x[i] * ax - b[i] * x[i];
                    }
                    f
                };
                let r = lbfgs_minimize(&mut obj, &vec![0.0; dim], &LbfgsOptions::new(2 * dim, 1e-8))
                    .unwrap();
                assert!(r.converged, "dim {dim}: {} iters, |g| {}", r.iterations, r.gradient_inf_norm);
            }
        }
    }

    #[test]
    fn non_finite_objective_aborts() {
        let mut obj = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            if x[0] < -0.5 { f64::NAN } else { x[0] }
        };
        let r = lbfgs_minimize(&mut obj, &[0.0], &LbfgsOptions::new(50, 1e-8));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let mut obj = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = lbfgs_minimize(&mut obj, &[-1.2, 1.0], &LbfgsOptions::new(3, 1e-12)).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }
}
