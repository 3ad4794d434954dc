use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::InvalidInput(format!(
                    "label pair ({t}, {p}) outside {n_classes} classes"
                )));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined("accuracy of an empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.n_classes()).map(|c| self.counts[c][c]).sum();
        Ok(diag as f64 / total as f64)
    }
}

/// Mean per-class recall. Classes with no true samples are skipped.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut recalls = Vec::with_capacity(cm.n_classes());
    for c in 0..cm.n_classes() {
        let support = cm.support(c);
        if support == 0 {
            warn!("balanced accuracy: class {c} has no samples and is excluded");
            continue;
        }
        recalls.push(cm.counts[c][c] as f64 / support as f64);
    }
    if recalls.is_empty() {
        return Err(Error::Undefined("balanced accuracy with no labelled samples".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Per-class F1 weighted by support; F1 is 0 when precision + recall = 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("weighted F1 of an empty confusion matrix".into()));
    }
    let mut acc = 0.0;
    for c in 0..cm.n_classes() {
        let support = cm.support(c);
        if support == 0 {
            continue;
        }
        let tp = cm.counts[c][c] as f64;
        let predicted = cm.predicted_count(c) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        acc += support as f64 / total as f64 * f1;
    }
    Ok(acc)
}

/// `(TP/(TP+FN), TN/(TN+FP))` for binary labels and flags.
pub fn sensitivity_specificity(labels: &[bool], flags: &[bool]) -> Result<(f64, f64)> {
    if labels.len() != flags.len() {
        return Err(Error::Shape(format!("{} labels vs {} flags", labels.len(), flags.len())));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for (&l, &f) in labels.iter().zip(flags) {
        match (l, f) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::Undefined("sensitivity without positive labels".into()));
    }
    if tn + fp == 0 {
        return Err(Error::Undefined("specificity without negative labels".into()));
    }
    Ok((tp as f64 / (tp + fn_) as f64, tn as f64 / (tn + fp) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        assert!((balanced_accuracy(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.5);
        // a class with no support is skipped
        let cm = ConfusionMatrix::from_labels(&[0, 0], &[0, 1], 3).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.5);
    }

    #[test]
    fn weighted_f1_examples() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(weighted_f1(&cm).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap();
        assert!((weighted_f1(&cm).unwrap() - 0.6).abs() < 1e-12);
        // class 1 never predicted: its F1 contributes zero
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        let f1_0 = 2.0 * 0.5 * 1.0 / 1.5;
        assert!((weighted_f1(&cm).unwrap() - 0.5 * f1_0).abs() < 1e-12);
        let empty = ConfusionMatrix::from_labels(&[], &[], 2).unwrap();
        assert!(weighted_f1(&empty).is_err());
    }

    #[test]
    fn sens_spec_examples() {
        let l = [true, true, false, false, false];
        assert_eq!(sensitivity_specificity(&l, &l).unwrap(), (1.0, 1.0));
        assert_eq!(sensitivity_specificity(&l, &[true; 5]).unwrap(), (1.0, 0.0));
        let (se, sp) = sensitivity_specificity(&l, &[true, false, false, false, true]).unwrap();
        assert_eq!(se, 0.5);
        assert!((sp - 2.0 / 3.0).abs() < 1e-15);
        assert!(sensitivity_specificity(&[false, false], &[true, false]).is_err());
    }

    /// Balanced accuracy of a label-permuted perfect predictor equals the
    /// fraction of fixed points of the permutation.
    #[test]
    fn permuted_predictor_by_enumeration() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        for c in 1..=4 {
            for perm in permutations(c) {
                let truth: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat(k).take(k + 1)).collect();
                let pred: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
                let cm = ConfusionMatrix::from_labels(&truth, &pred, c).unwrap();
                let fixed = (0..c).filter(|&k| perm[k] == k).count() as f64 / c as f64;
                assert!((balanced_accuracy(&cm).unwrap() - fixed).abs() < 1e-15);
            }
        }
    }
}
