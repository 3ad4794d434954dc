use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Increments `state.step` first,
/// so the first call uses step 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("adam: gradient component {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.25, 0.25];
        let before_m = s.m.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut AdamState::new(2), &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert!(s.m.iter().zip(&before_m).all(|(a, b)| a.abs() < b.abs()));
        assert!(s.v.iter().all(|&v| v < 0.25));
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // At t = 1: m_hat = g, v_hat = g², update = lr · g / (|g| + eps).
        for g in [1e-3, 0.5, 3.0, 1e4] {
            let mut p = vec![0.0];
            adam_step(&mut p, &[g], &mut AdamState::new(1), &AdamConfig::with_lr(0.01)).unwrap();
            assert!((p[0].abs() - 0.01).abs() <= 0.01 * 1e-4, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = vec![0.3, 0.1];
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        for g in [[0.1, -0.2], [0.4, 0.0], [-1.0, 2.0]] {
            adam_step(&mut a, &g, &mut sa, &AdamConfig::default()).unwrap();
            adam_step(&mut b, &g, &mut sb, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn errors() {
        let mut p = vec![0.0; 2];
        assert!(matches!(
            adam_step(&mut p, &[0.0], &mut AdamState::new(2), &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN, 0.0], &mut AdamState::new(2), &AdamConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }
}
