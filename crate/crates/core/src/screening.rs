//! Operating-point calibration, slide flagging and multi-site reporting for
//! the early-cancer screening head.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::{bootstrap_ci, BootstrapOptions};

pub const DEFAULT_TARGET_SENSITIVITY: f64 = 0.99;

/// Which diagnosis classes count as screening positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningTaxonomy {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl Default for ScreeningTaxonomy {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            positive: s(&[
                "low-grade intraepithelial neoplasia",
                "high-grade intraepithelial neoplasia",
                "malignant tumor",
            ]),
            negative: s(&["benign polyp", "chronic gastritis", "intestinal metaplasia"]),
        }
    }
}

impl ScreeningTaxonomy {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.positive.iter().find(|c| self.negative.contains(c)) {
            return Err(Error::Config(format!("diagnosis {c:?} is listed as both positive and negative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningLabel {
    Positive,
    Negative,
}

/// Maps a diagnosis to its screening label. Unmapped classes are an error.
pub fn positive_label_rule(diagnosis: &str, taxonomy: &ScreeningTaxonomy) -> Result<ScreeningLabel> {
    let d = diagnosis.trim();
    let pos = taxonomy.positive.iter().any(|c| c == d);
    let neg = taxonomy.negative.iter().any(|c| c == d);
    match (pos, neg) {
        (true, false) => Ok(ScreeningLabel::Positive),
        (false, true) => Ok(ScreeningLabel::Negative),
        (true, true) => Err(Error::Config(format!("diagnosis {d:?} is listed as both positive and negative"))),
        (false, false) => Err(Error::InvalidInput(format!("diagnosis {d:?} is not in the screening taxonomy"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub target_sensitivity: f64,
    pub achieved_sensitivity: f64,
    pub achieved_specificity: f64,
    pub calibration_n: usize,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        Some(i) => Err(Error::InvalidInput(format!("score {} at index {i} is not a probability", scores[i]))),
        None => Ok(()),
    }
}

/// Largest threshold whose flag rule `score >= t` reaches `target`
/// sensitivity on the calibration data. Candidates are the observed scores
/// plus 0.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidInput(format!("target sensitivity {target} outside [0, 1]")));
    }
    check_scores(scores)?;
    let mut pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let n_pos = pos.len();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("calibration set must contain both classes".into()));
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    // Fewest flagged positives meeting the target.
    let need = (0..=n_pos).find(|&k| k as f64 / n_pos as f64 >= target).unwrap_or(n_pos);
    let threshold = if need == 0 {
        scores.iter().copied().fold(0.0, f64::max)
    } else {
        pos[need - 1]
    };
    let tp = pos.iter().filter(|&&s| s >= threshold).count();
    let tn = scores.iter().zip(labels).filter(|(s, l)| !**l && **s < threshold).count();
    Ok(OperatingPoint {
        threshold,
        target_sensitivity: target,
        achieved_sensitivity: tp as f64 / n_pos as f64,
        achieved_specificity: tn as f64 / n_neg as f64,
        calibration_n: scores.len(),
    })
}

pub fn apply_screening(scores: &[f64], op: &OperatingPoint) -> Vec<bool> {
    scores.iter().map(|&s| s >= op.threshold).collect()
}

/// One operating point per site, for ablations against pooled calibration.
pub fn calibrate_per_site(
    sites: &[String],
    scores: &[f64],
    labels: &[bool],
    target: f64,
) -> Result<BTreeMap<String, OperatingPoint>> {
    if sites.len() != scores.len() {
        return Err(Error::Shape(format!("{} sites vs {} scores", sites.len(), scores.len())));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((site, &s), &l) in sites.iter().zip(scores).zip(labels) {
        let g = groups.entry(site).or_default();
        g.0.push(s);
        g.1.push(l);
    }
    groups
        .into_iter()
        .map(|(site, (s, l))| {
            calibrate_threshold(&s, &l, target)
                .map(|op| (site.to_string(), op))
                .map_err(|e| Error::InvalidInput(format!("site {site:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRecord {
    pub slide_id: String,
    pub site: String,
    pub positive: bool,
    pub flagged: bool,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub point: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// `None` is written as the string `"n/a"`.
mod na {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<RateEstimate>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(r) => r.serialize(s),
            None => s.serialize_str("n/a"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<RateEstimate>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Rate(RateEstimate),
            Text(String),
        }
        match Either::deserialize(d)? {
            Either::Rate(r) => Ok(Some(r)),
            Either::Text(t) if t == "n/a" => Ok(None),
            Either::Text(t) => Err(serde::de::Error::custom(format!("expected rate or \"n/a\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site: String,
    pub n_slides: usize,
    pub n_positive: usize,
    pub true_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    #[serde(with = "na")]
    pub sensitivity: Option<RateEstimate>,
    #[serde(with = "na")]
    pub specificity: Option<RateEstimate>,
    pub accuracy: RateEstimate,
    pub missed_case_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissedCase {
    pub slide_id: String,
    pub site: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub sites: Vec<SiteReport>,
    pub pooled: SiteReport,
    pub bootstrap_replicates: usize,
}

pub const POOLED_SITE: &str = "pooled";

fn rate_ci<F>(n: usize, point: f64, metric: F, opts: &BootstrapOptions) -> Result<RateEstimate>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    // A single slide resamples to itself.
    if n < 2 {
        return Ok(RateEstimate { point, ci_lower: point, ci_upper: point });
    }
    let ci = bootstrap_ci(metric, n, opts)?;
    Ok(RateEstimate { point: ci.point, ci_lower: ci.lower, ci_upper: ci.upper })
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn summarize(site: &str, rows: &[&ScreeningRecord], opts: &BootstrapOptions) -> Result<SiteReport> {
    let count = |idx: &mut dyn Iterator<Item = usize>| {
        let mut c = [0usize; 4]; // tp, fn, tn, fp
        for i in idx {
            let r = rows[i];
            c[match (r.positive, r.flagged) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            }] += 1;
        }
        c
    };
    let n = rows.len();
    let [tp, fn_, tn, fp] = count(&mut (0..n));
    let sens = |idx: &[usize]| {
        let c = count(&mut idx.iter().copied());
        ratio(c[0], c[0] + c[1])
    };
    let spec = |idx: &[usize]| {
        let c = count(&mut idx.iter().copied());
        ratio(c[2], c[2] + c[3])
    };
    let acc = |idx: &[usize]| {
        let c = count(&mut idx.iter().copied());
        ratio(c[0] + c[2], idx.len())
    };
    let sensitivity = match ratio(tp, tp + fn_) {
        Some(p) => Some(rate_ci(n, p, sens, opts)?),
        None => None,
    };
    let specificity = match ratio(tn, tn + fp) {
        Some(p) => Some(rate_ci(n, p, spec, opts)?),
        None => None,
    };
    let accuracy = rate_ci(n, (tp + tn) as f64 / n as f64, acc, opts)?;
    Ok(SiteReport {
        site: site.to_string(),
        n_slides: n,
        n_positive: tp + fn_,
        true_positive: tp,
        false_negative: fn_,
        true_negative: tn,
        false_positive: fp,
        sensitivity,
        specificity,
        accuracy,
        missed_case_ids: rows.iter().filter(|r| r.positive && !r.flagged).map(|r| r.slide_id.clone()).collect(),
    })
}

/// Per-site and pooled screening performance with percentile-bootstrap
/// intervals. Sites are reported in name order; site `i` bootstraps with
/// seed `seed + i + 1` and the pooled row with `seed`.
pub fn site_report(records: &[ScreeningRecord], replicates: usize, seed: u64) -> Result<ScreeningReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("screening report needs at least one slide".into()));
    }
    let mut by_site: BTreeMap<&str, Vec<&ScreeningRecord>> = BTreeMap::new();
    for r in records {
        by_site.entry(r.site.as_str()).or_default().push(r);
    }
    let sites = by_site
        .iter()
        .enumerate()
        .map(|(i, (site, rows))| summarize(site, rows, &BootstrapOptions::new(replicates, seed.wrapping_add(i as u64 + 1))))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&ScreeningRecord> = records.iter().collect();
    let pooled = summarize(POOLED_SITE, &all, &BootstrapOptions::new(replicates, seed))?;
    Ok(ScreeningReport { sites, pooled, bootstrap_replicates: replicates })
}

fn fmt_rate(r: &Option<RateEstimate>) -> String {
    match r {
        Some(r) => format!("{},{},{}", r.point, r.ci_lower, r.ci_upper),
        None => "n/a,n/a,n/a".into(),
    }
}

impl ScreeningReport {
    /// One row per site plus the pooled row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "site,n,n_positive,sensitivity,sensitivity_ci_lower,sensitivity_ci_upper,\
             specificity,specificity_ci_lower,specificity_ci_upper,accuracy,accuracy_ci_lower,accuracy_ci_upper\n",
        );
        for s in self.sites.iter().chain(std::iter::once(&self.pooled)) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.site,
                s.n_slides,
                s.n_positive,
                fmt_rate(&s.sensitivity),
                fmt_rate(&s.specificity),
                s.accuracy.point,
                s.accuracy.ci_lower,
                s.accuracy.ci_upper
            ));
        }
        out
    }
}

/// Missed positives as JSON lines, in input order.
pub fn missed_cases_jsonl(records: &[ScreeningRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records.iter().filter(|r| r.positive && !r.flagged) {
        let m = MissedCase { slide_id: r.slide_id.clone(), site: r.site.clone(), score: r.score };
        out.push_str(&serde_json::to_string(&m).map_err(|e| Error::InvalidInput(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn op(t: f64) -> OperatingPoint {
        OperatingPoint {
            threshold: t,
            target_sensitivity: 1.0,
            achieved_sensitivity: 1.0,
            achieved_specificity: 0.0,
            calibration_n: 0,
        }
    }

    #[test]
    fn taxonomy_mapping() {
        let t = ScreeningTaxonomy::default();
        assert_eq!(positive_label_rule("low-grade intraepithelial neoplasia", &t).unwrap(), ScreeningLabel::Positive);
        assert_eq!(positive_label_rule("chronic gastritis", &t).unwrap(), ScreeningLabel::Negative);
        assert!(positive_label_rule("unknown", &t).is_err());
        let bad = ScreeningTaxonomy { positive: vec!["x".into()], negative: vec!["x".into()] };
        assert!(bad.validate().is_err());
        assert!(positive_label_rule("x", &bad).is_err());
    }

    #[test]
    fn calibration_examples() {
        let s = [0.9, 0.8, 0.2, 0.7, 0.1];
        let l = [true, true, true, false, false];
        let o = calibrate_threshold(&s, &l, 1.0).unwrap();
        assert_eq!((o.threshold, o.achieved_sensitivity, o.achieved_specificity), (0.2, 1.0, 0.5));
        let o = calibrate_threshold(&s, &l, 0.0).unwrap();
        assert_eq!(o.threshold, 0.9);
        let o = calibrate_threshold(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false], 1.0).unwrap();
        assert_eq!(o.achieved_specificity, 1.0);
        assert!(calibrate_threshold(&[0.5, 0.6], &[true, true], 0.9).is_err());
        assert!(calibrate_threshold(&[0.5, 1.6], &[true, false], 0.9).is_err());
    }

    #[test]
    fn flag_rule() {
        assert_eq!(apply_screening(&[0.3, 0.29999, 1.0], &op(0.3)), [true, false, true]);
        assert!(apply_screening(&[0.0, 0.5, 1.0], &op(0.0)).iter().all(|&f| f));
        let above = f64::from_bits(1.0f64.to_bits() + 1);
        assert!(apply_screening(&[0.0, 0.5, 0.999_999], &op(above)).iter().all(|&f| !f));
    }

    fn brute_force(scores: &[f64], labels: &[bool], target: f64) -> f64 {
        let mut cands: Vec<f64> = scores.to_vec();
        cands.push(0.0);
        let p = labels.iter().filter(|&&l| l).count() as f64;
        cands
            .into_iter()
            .filter(|&t| scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64 / p >= target)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    proptest! {
        #[test]
        fn calibration_meets_target_and_is_largest(
            data in prop::collection::vec((0u8..=20, any::<bool>()), 2..60),
            target in 0.0f64..=1.0,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let mut labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            labels[0] = true;
            labels[1] = false;
            let o = calibrate_threshold(&scores, &labels, target).unwrap();
            prop_assert!(o.achieved_sensitivity >= target);
            prop_assert_eq!(o.threshold, brute_force(&scores, &labels, target));
        }

        #[test]
        fn raising_threshold_is_monotone(
            data in prop::collection::vec((0u8..=20, any::<bool>()), 2..60),
            a in 0u8..=21, b in 0u8..=21,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let mut labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            labels[0] = true;
            labels[1] = false;
            let (lo, hi) = (a.min(b) as f64 / 20.0, a.max(b) as f64 / 20.0);
            let m = |t| crate::metrics::sensitivity_specificity(&labels, &apply_screening(&scores, &op(t))).unwrap();
            let (s_lo, p_lo) = m(lo);
            let (s_hi, p_hi) = m(hi);
            prop_assert!(s_hi <= s_lo && p_hi >= p_lo);
        }
    }

    fn rec(id: &str, site: &str, positive: bool, flagged: bool) -> ScreeningRecord {
        ScreeningRecord { slide_id: id.into(), site: site.into(), positive, flagged, score: if flagged { 0.9 } else { 0.1 } }
    }

    #[test]
    fn single_site_all_correct() {
        let rs = vec![rec("a", "s", true, true), rec("b", "s", false, false), rec("c", "s", true, true)];
        let r = site_report(&rs, 200, 1).unwrap();
        let s = &r.sites[0];
        assert_eq!(s.sensitivity.unwrap().point, 1.0);
        assert_eq!(s.specificity.unwrap().point, 1.0);
        assert_eq!(s.accuracy.point, 1.0);
        assert!(s.missed_case_ids.is_empty());
    }

    #[test]
    fn site_without_positives_is_na() {
        let rs = vec![rec("a", "neg-only", false, false), rec("b", "neg-only", false, true), rec("c", "mixed", true, false)];
        let r = site_report(&rs, 100, 3).unwrap();
        let s = r.sites.iter().find(|s| s.site == "neg-only").unwrap();
        assert!(s.sensitivity.is_none());
        let js = serde_json::to_value(s).unwrap();
        assert_eq!(js["sensitivity"], "n/a");
        let back: SiteReport = serde_json::from_value(js).unwrap();
        assert_eq!(&back, s);
        assert!(r.to_csv().lines().any(|l| l.starts_with("neg-only,2,0,n/a,n/a,n/a,0.5,")));
        assert_eq!(r.sites.iter().find(|s| s.site == "mixed").unwrap().missed_case_ids, ["c"]);
        assert_eq!(missed_cases_jsonl(&rs).unwrap(), "{\"slide_id\":\"c\",\"site\":\"mixed\",\"score\":0.1}\n");
    }

    #[test]
    fn nine_sites_match_counting_oracle() {
        let mut rng = RngStream::new(9, 0);
        let mut rs = Vec::new();
        for site in 0..9 {
            let (miss, false_alarm) = (0.01 * site as f64, 0.05 + 0.02 * site as f64);
            for i in 0..(150 + 10 * site) {
                let positive = rng.uniform() < 0.3;
                let flagged = if positive { rng.uniform() >= miss } else { rng.uniform() < false_alarm };
                rs.push(rec(&format!("s{site}-{i}"), &format!("site-{site}"), positive, flagged));
            }
        }
        let r = site_report(&rs, 100, 5).unwrap();
        assert_eq!(r.sites.len(), 9);
        let mut totals = [0usize; 4];
        for s in &r.sites {
            let mine: Vec<&ScreeningRecord> = rs.iter().filter(|x| x.site == s.site).collect();
            let c = |p: bool, f: bool| mine.iter().filter(|x| x.positive == p && x.flagged == f).count();
            let (tp, fn_, tn, fp) = (c(true, true), c(true, false), c(false, false), c(false, true));
            assert_eq!((s.true_positive, s.false_negative, s.true_negative, s.false_positive), (tp, fn_, tn, fp));
            assert_eq!(s.sensitivity.unwrap().point, tp as f64 / (tp + fn_) as f64);
            assert_eq!(s.specificity.unwrap().point, tn as f64 / (tn + fp) as f64);
            assert_eq!(s.accuracy.point, (tp + tn) as f64 / mine.len() as f64);
            let e = s.sensitivity.unwrap();
            assert!(e.ci_lower <= e.point && e.point <= e.ci_upper);
            for (t, v) in totals.iter_mut().zip([tp, fn_, tn, fp]) {
                *t += v;
            }
        }
        let p = &r.pooled;
        assert_eq!([p.true_positive, p.false_negative, p.true_negative, p.false_positive], totals);
        let labels: Vec<bool> = rs.iter().map(|x| x.positive).collect();
        let flags: Vec<bool> = rs.iter().map(|x| x.flagged).collect();
        let (se, sp) = crate::metrics::sensitivity_specificity(&labels, &flags).unwrap();
        assert_eq!((p.sensitivity.unwrap().point, p.specificity.unwrap().point), (se, sp));
        assert_eq!(r, site_report(&rs, 100, 5).unwrap());
    }

    #[test]
    fn per_site_calibration() {
        let sites: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let m = calibrate_per_site(&sites, &[0.9, 0.1, 0.4, 0.3], &[true, false, true, false], 1.0).unwrap();
        assert_eq!(m["a"].threshold, 0.9);
        assert_eq!(m["b"].threshold, 0.4);
    }
}
