use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

/// Upper tail `P(X > x)` of a chi-square variable with `df` degrees of
/// freedom, via the regularized upper incomplete gamma `Q(df/2, x/2)`.
pub fn chi_square_sf(x: f64, df: u32) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidInput("chi-square with 0 degrees of freedom".into()));
    }
    if !(x >= 0.0) {
        return Err(Error::InvalidInput(format!("chi-square statistic must be >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0))
}

/// Two-sided tail `P(|T| >= |t|)` of Student's t with (possibly fractional)
/// `df` degrees of freedom: `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::InvalidInput(format!("t distribution with df = {df}")));
    }
    if t.is_nan() {
        return Err(Error::NonFinite("t statistic is NaN".into()));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let z = df / (df + t * t);
    Ok(beta_reg(df / 2.0, 0.5, z).clamp(0.0, 1.0))
}
