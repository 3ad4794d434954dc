use log::warn;

use crate::error::{Error, Result};

/// Mann–Whitney U with midranks for ties, divided by `n_pos·n_neg`.
///
/// Equals `P(score_pos > score_neg) + 0.5·P(tie)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum keeps every midrank an integer.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let midrank_x2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += midrank_x2 * pos_in_group;
        i = j + 1;
    }
    let np = n_pos as u128;
    // 2U = 2·R - n_pos(n_pos + 1); U·2 counts concordant pairs twice, ties once.
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUROC from per-class probabilities. Classes without
/// both positives and negatives are skipped with a warning.
pub fn multiclass_auroc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", probs.len(), labels.len())));
    }
    if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&scores, &bin);
    }
    let mut values = Vec::new();
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match auroc(&scores, &bin) {
            Ok(v) => values.push(v),
            Err(Error::Undefined(_)) => warn!("one-vs-rest AUROC undefined for class {c}; skipped"),
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::Undefined("no class has a defined one-vs-rest AUROC".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// ROC curve points `(fpr, tpr, threshold)` for the rule `score >= threshold`,
/// from the strictest threshold down.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    auroc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] { tp += 1.0 } else { fp += 1.0 }
            i += 1;
        }
        pts.push((fp / n_neg, tp / n_pos, t));
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    pub(crate) fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut np, mut nn) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li { np += 1.0 } else { nn += 1.0 }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / (np * nn)
    }

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        let v = auroc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(v, 0.75);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn matches_pair_enumeration_with_ties() {
        let mut rng = RngStream::new(42, 1);
        for _ in 0..200 {
            let n = 2 + rng.below(499);
            let levels = 1 + rng.below(20);
            let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auroc(&scores, &labels).unwrap(), brute(&scores, &labels));
        }
    }

    #[test]
    fn multiclass_macro() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.2, 0.7],
            vec![0.6, 0.3, 0.1],
        ];
        assert_eq!(multiclass_auroc(&probs, &[0, 1, 2, 0], 3).unwrap(), 1.0);
    }

    #[test]
    fn roc_curve_ends() {
        let pts = roc_points(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(pts.first().unwrap().0, 0.0);
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0, 0.1));
        // trapezoid area equals AUROC
        let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((area - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            let t: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(a, auroc(&t, &labels).unwrap());
            prop_assert_eq!(a, brute(&scores, &labels));
        }
    }
}
