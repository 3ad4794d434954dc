//! Negative mean Cox partial log-likelihood with Breslow risk sets
//! (`T_j >= T_i`).

use crate::datastore::SurvivalRecord;
use crate::error::{Error, Result};

fn check(theta: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if theta.len() != records.len() {
        return Err(Error::Shape(format!(
            "{} risk scores for {} survival records",
            theta.len(),
            records.len()
        )));
    }
    if theta.is_empty() {
        return Err(Error::InvalidInput("Cox loss of an empty sample".into()));
    }
    if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("risk score {i}")));
    }
    if let Some(i) = records.iter().position(|r| !(r.time_days.is_finite() && r.time_days > 0.0)) {
        return Err(Error::NonFinite(format!("survival time {i}")));
    }
    Ok(())
}

/// Running log-sum-exp that stays finite for any finite inputs.
#[derive(Clone, Copy)]
struct OnlineLse {
    max: f64,
    sum: f64,
}

impl OnlineLse {
    fn new() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    fn push(&mut self, v: f64) {
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// `log Σ_{j: T_j >= T_i} e^{θ_j}` for every sample `i`.
fn risk_set_lse(theta: &[f64], records: &[SurvivalRecord]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| records[b].time_days.total_cmp(&records[a].time_days));
    let mut out = vec![0.0; theta.len()];
    let mut acc = OnlineLse::new();
    let mut g = 0;
    while g < order.len() {
        // a block of tied times joins the risk set together
        let t = records[order[g]].time_days;
        let mut h = g;
        while h < order.len() && records[order[h]].time_days == t {
            acc.push(theta[order[h]]);
            h += 1;
        }
        let v = acc.value();
        for &i in &order[g..h] {
            out[i] = v;
        }
        g = h;
    }
    out
}

/// `-(1/N) Σ_i E_i [θ_i - log Σ_{j: T_j >= T_i} e^{θ_j}]`.
pub fn cox_loss(theta: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    check(theta, records)?;
    let lse = risk_set_lse(theta, records);
    let total: f64 = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.event)
        .map(|(i, _)| theta[i] - lse[i])
        .sum();
    Ok(-total / theta.len() as f64)
}

/// Loss and its gradient with respect to `θ`.
pub fn cox_loss_and_grad(theta: &[f64], records: &[SurvivalRecord]) -> Result<(f64, Vec<f64>)> {
    check(theta, records)?;
    let n = theta.len();
    let lse = risk_set_lse(theta, records);

    // log Σ_{i: E_i, T_i <= T_k} e^{-lse_i}, accumulated in ascending time.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].time_days.total_cmp(&records[b].time_days));
    let mut log_prefix = vec![f64::NEG_INFINITY; n];
    let mut acc = OnlineLse::new();
    let mut g = 0;
    while g < n {
        let t = records[order[g]].time_days;
        let mut h = g;
        while h < n && records[order[h]].time_days == t {
            if records[order[h]].event {
                acc.push(-lse[order[h]]);
            }
            h += 1;
        }
        let v = if acc.sum > 0.0 { acc.value() } else { f64::NEG_INFINITY };
        for &k in &order[g..h] {
            log_prefix[k] = v;
        }
        g = h;
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let e = if records[k].event { 1.0 } else { 0.0 };
        if records[k].event {
            loss += theta[k] - lse[k];
        }
        let share = if log_prefix[k].is_finite() {
            (theta[k] + log_prefix[k]).exp()
        } else {
            0.0
        };
        grad[k] = -inv_n * (e - share);
    }
    Ok((-loss * inv_n, grad))
}

pub fn cox_loss_grad(theta: &[f64], records: &[SurvivalRecord]) -> Result<Vec<f64>> {
    Ok(cox_loss_and_grad(theta, records)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, log_sum_exp, RngStream};

    fn rec(t: f64, e: bool) -> SurvivalRecord {
        SurvivalRecord { time_days: t, event: e }
    }

    /// Literal transcription of the loss with an O(N²) risk set.
    pub(crate) fn naive_loss(theta: &[f64], r: &[SurvivalRecord]) -> f64 {
        let mut s = 0.0;
        for i in 0..r.len() {
            if !r[i].event {
                continue;
            }
            let set: Vec<f64> = (0..r.len()).filter(|&j| r[j].time_days >= r[i].time_days).map(|j| theta[j]).collect();
            s += theta[i] - log_sum_exp(&set).unwrap();
        }
        -s / r.len() as f64
    }

    fn random_instance(rng: &mut RngStream, n: usize) -> (Vec<f64>, Vec<SurvivalRecord>) {
        let theta = (0..n).map(|_| 2.0 * rng.standard_normal()).collect();
        let recs = (0..n)
            // coarse times so tied event times occur
            .map(|_| rec(1.0 + rng.below(n.max(2) / 2 + 1) as f64, rng.uniform() < 0.7))
            .collect();
        (theta, recs)
    }

    #[test]
    fn hand_values() {
        assert_eq!(cox_loss(&[3.7], &[rec(5.0, true)]).unwrap(), 0.0);
        let v = cox_loss(&[0.0, 0.0], &[rec(1.0, true), rec(2.0, true)]).unwrap();
        assert!((v - 2f64.ln() / 2.0).abs() <= 1e-12);
        let all_censored = [rec(1.0, false), rec(2.0, false), rec(3.0, false)];
        assert_eq!(cox_loss(&[1.0, -2.0, 5.0], &all_censored).unwrap(), 0.0);
        assert_eq!(cox_loss_grad(&[1.0, -2.0, 5.0], &all_censored).unwrap(), vec![0.0; 3]);
        assert_eq!(cox_loss_grad(&[0.4], &[rec(1.0, true)]).unwrap(), vec![0.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(cox_loss(&[0.0], &[]), Err(Error::Shape(_))));
        assert!(matches!(cox_loss(&[f64::NAN], &[rec(1.0, true)]), Err(Error::NonFinite(_))));
        assert!(cox_loss(&[], &[]).is_err());
    }

    #[test]
    fn matches_naive_and_finite_differences() {
        let mut rng = RngStream::new(30, 0);
        for _ in 0..50 {
            let n = 1 + rng.below(50);
            let (theta, recs) = random_instance(&mut rng, n);
            let fast = cox_loss(&theta, &recs).unwrap();
            assert!((fast - naive_loss(&theta, &recs)).abs() <= 1e-12 * fast.abs().max(1.0));
            let err = gradient_check(
                |x, g| {
                    let (l, gr) = cox_loss_and_grad(x, &recs).unwrap();
                    g.copy_from_slice(&gr);
                    l
                },
                &theta,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-6, "n={n} err={err}");
        }
    }

    #[test]
    fn shift_invariance_and_score_structure() {
        let mut rng = RngStream::new(31, 0);
        for _ in 0..50 {
            let n = 2 + rng.below(40);
            let theta: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let recs: Vec<SurvivalRecord> = (0..n).map(|i| rec(1.0 + i as f64 + rng.uniform() * 0.5, true)).collect();
            let c = 3.0 * rng.standard_normal();
            let shifted: Vec<f64> = theta.iter().map(|t| t + c).collect();
            let a = cox_loss(&theta, &recs).unwrap();
            let b = cox_loss(&shifted, &recs).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} {b}");
            let g = cox_loss_grad(&theta, &recs).unwrap();
            assert!(g.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let recs = [rec(1.0, true), rec(2.0, true), rec(3.0, false)];
        let (l, g) = cox_loss_and_grad(&[800.0, -800.0, 0.0], &recs).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }
}
