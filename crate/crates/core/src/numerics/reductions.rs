use crate::error::{Error, Result};

fn check(v: &[f64], what: &str) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidInput(format!("{what} of an empty vector")));
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{what}: entry {i} is {x}")));
        }
        max = max.max(x);
    }
    Ok(max)
}

/// Softmax with max-shift; never overflows for finite input.
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let max = check(v, "softmax")?;
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// `log Σ exp(v_i)` with max-shift.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = check(v, "log-sum-exp")?;
    if v.len() == 1 {
        return Ok(v[0]);
    }
    let total: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + total.ln())
}
