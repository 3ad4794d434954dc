use serde::{Deserialize, Serialize};

use crate::datastore::SurvivalRecord;
use crate::error::{Error, Result};
use crate::numerics::{chi_square_sf, mean, sample_variance, student_t_two_sided};

/// Harrell's C-index.
///
/// A pair is comparable when `T_i < T_j` and `E_i = 1`; it is concordant when
/// `θ_i > θ_j`, and risk ties count one half. Pairs with tied times are not
/// comparable.
pub fn c_index(theta: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if theta.len() != records.len() {
        return Err(Error::Shape(format!("{} scores vs {} records", theta.len(), records.len())));
    }
    if let Some(i) = theta.iter().position(|t| t.is_nan()) {
        return Err(Error::NonFinite(format!("risk score {i} is NaN")));
    }
    let n = theta.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time_days.total_cmp(&records[a].time_days));

    // θ of samples with strictly later times, kept sorted.
    let mut later: Vec<f64> = Vec::with_capacity(n);
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut g = 0;
    while g < n {
        let t = records[order[g]].time_days;
        let mut h = g;
        while h < n && records[order[h]].time_days == t {
            h += 1;
        }
        for &i in &order[g..h] {
            if !records[i].event {
                continue;
            }
            let below = later.partition_point(|&v| v < theta[i]);
            let not_above = later.partition_point(|&v| v <= theta[i]);
            concordant += below as u64;
            tied += (not_above - below) as u64;
            comparable += later.len() as u64;
        }
        for &i in &order[g..h] {
            let pos = later.partition_point(|&v| v < theta[i]);
            later.insert(pos, theta[i]);
        }
        g = h;
    }
    if comparable == 0 {
        return Err(Error::Undefined("C-index has no comparable pairs".into()));
    }
    // 2·concordant + tied over 2·comparable, so half-counts stay integral.
    Ok((2 * concordant + tied) as f64 / (2 * comparable) as f64)
}

/// Product-limit survivor estimate at each distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `Ŝ(t)`: 1 before the first event time.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 { 1.0 } else { self.survival[k - 1] }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,survival,at_risk\n");
        for i in 0..self.times.len() {
            s.push_str(&format!("{},{},{}\n", self.times[i], self.survival[i], self.at_risk[i]));
        }
        s
    }
}

pub fn km_curve(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::InvalidInput("Kaplan-Meier of an empty sample".into()));
    }
    let mut sorted: Vec<SurvivalRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.time_days.total_cmp(&b.time_days));
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], events: vec![] };
    let mut s = 1.0;
    let mut at_risk = sorted.len();
    let mut g = 0;
    while g < sorted.len() {
        let t = sorted[g].time_days;
        let mut h = g;
        let mut d = 0;
        while h < sorted.len() && sorted[h].time_days == t {
            d += sorted[h].event as usize;
            h += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
        at_risk -= h - g;
        g = h;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
}

/// Two-group log-rank test with hypergeometric variance.
pub fn logrank_test(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::InvalidInput("log-rank test needs two non-empty groups".into()));
    }
    let mut pooled: Vec<(f64, bool, bool)> = group_a
        .iter()
        .map(|r| (r.time_days, r.event, true))
        .chain(group_b.iter().map(|r| (r.time_days, r.event, false)))
        .collect();
    if !pooled.iter().any(|p| p.1) {
        return Err(Error::Undefined("log-rank test with no events".into()));
    }
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut n_a, mut n_b) = (group_a.len() as f64, group_b.len() as f64);
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut g = 0;
    while g < pooled.len() {
        let t = pooled[g].0;
        let (mut d_a, mut d_b, mut left_a, mut left_b) = (0.0, 0.0, 0.0, 0.0);
        let mut h = g;
        while h < pooled.len() && pooled[h].0 == t {
            let (_, e, in_a) = pooled[h];
            if in_a {
                left_a += 1.0;
                if e { d_a += 1.0 }
            } else {
                left_b += 1.0;
                if e { d_b += 1.0 }
            }
            h += 1;
        }
        let d = d_a + d_b;
        if d > 0.0 {
            let n = n_a + n_b;
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= left_a;
        n_b -= left_b;
        g = h;
    }
    let diff = obs - exp;
    let chi2 = if var > 0.0 { diff * diff / var } else { 0.0 };
    Ok(LogRankResult {
        chi2,
        p_value: chi_square_sf(chi2, 1)?,
        observed_a: obs,
        expected_a: exp,
    })
}

/// Low/high risk groups split at a quantile of `θ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskStrata {
    pub low: Vec<usize>,
    pub high: Vec<usize>,
}

/// `θ > cut` is high risk, `θ <= cut` low, where `cut` is the order statistic
/// at index `floor((N - 1)·q)` (the lower-middle value for the median).
pub fn stratify_by_risk_quantile(theta: &[f64], q: f64) -> Result<RiskStrata> {
    if theta.len() < 2 {
        return Err(Error::InvalidInput("stratification needs at least 2 samples".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = theta.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[((sorted.len() - 1) as f64 * q).floor() as usize];
    let (high, low): (Vec<usize>, Vec<usize>) = (0..theta.len()).partition(|&i| theta[i] > cut);
    if high.is_empty() || low.is_empty() {
        return Err(Error::Degenerate(format!(
            "risk split at {cut} leaves an empty group ({} low, {} high)",
            low.len(),
            high.len()
        )));
    }
    Ok(RiskStrata { low, high })
}

pub fn stratify_by_median_risk(theta: &[f64]) -> Result<RiskStrata> {
    stratify_by_risk_quantile(theta, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("Welch test needs at least 2 values per sample".into()));
    }
    let (va, vb) = (sample_variance(a) / a.len() as f64, sample_variance(b) / b.len() as f64);
    let se2 = va + vb;
    if !(se2 > 0.0) {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok(WelchResult { t, df, p_value: student_t_two_sided(t, df)? })
}
