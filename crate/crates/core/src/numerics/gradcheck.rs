use crate::error::{Error, Result};

/// Central-difference check of an analytic gradient.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn gradient_check<F>(mut objective: F, x: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut analytic = vec![0.0; n];
    let f0 = objective(x, &mut analytic);
    if !f0.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient check at the base point".into()));
    }
    let mut scratch = vec![0.0; n];
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..n {
        xp[i] = x[i] + epsilon;
        let fp = objective(&xp, &mut scratch);
        xp[i] = x[i] - epsilon;
        let fm = objective(&xp, &mut scratch);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("gradient check along coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let c = [0.5, -1.0, 2.0];
        let err = gradient_check(
            |x, g| {
                g.copy_from_slice(&c);
                x.iter().zip(&c).map(|(a, b)| a * b).sum()
            },
            &[0.1, 0.2, 0.3],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let err = gradient_check(
            |x, g| {
                for i in 0..x.len() {
                    g[i] = 2.0 * (i as f64 + 1.0) * x[i] + 1.0;
                }
                x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v + v).sum()
            },
            &[0.3, -0.7, 1.1, 0.05],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let err = gradient_check(
            |x, g| {
                g[0] = 3.0 * x[0];
                x[0] * x[0]
            },
            &[1.0],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn non_finite_is_error() {
        let r = gradient_check(|x, g| { g[0] = 1.0; if x[0] > 1.0 { f64::NAN } else { x[0] } }, &[1.0], 1e-3);
        assert!(r.is_err());
    }
}
