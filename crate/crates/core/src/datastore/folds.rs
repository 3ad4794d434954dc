use std::collections::BTreeMap;

use super::types::{Cohort, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Stratum used for fold balancing: the class label, or the event indicator
/// for survival cohorts.
fn stratum(cohort: &Cohort, i: usize) -> Result<usize> {
    let s = &cohort.slides[i];
    match (cohort.task_kind, s.label, s.survival) {
        (_, Some(l), _) => Ok(l),
        (TaskKind::Survival, None, Some(rec)) => Ok(rec.event as usize),
        _ => Err(Error::InvalidInput(format!(
            "slide {:?} has no label to stratify on",
            s.slide_id
        ))),
    }
}

/// Stratified `k`-fold assignment, deterministic in `seed`.
///
/// Within each stratum slides are shuffled and dealt round-robin; the deal
/// starts where the previous stratum stopped so overall fold sizes also
/// differ by at most one.
pub fn assign_folds(cohort: &mut Cohort, k: usize, seed: u64) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("fold count must be >= 2, got {k}")));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..cohort.slides.len() {
        strata.entry(stratum(cohort, i)?).or_default().push(i);
    }
    for (class, members) in &strata {
        if members.len() < k {
            return Err(Error::Unsatisfiable(format!(
                "stratum {class} has {} slides, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let root = RngStream::new(seed, 0x464f_4c44); // "FOLD"
    let mut offset = 0usize;
    for (class, mut members) in strata {
        let mut rng = root.derive(class as u64);
        rng.shuffle(&mut members);
        for (j, &i) in members.iter().enumerate() {
            cohort.slides[i].fold = Some((offset + j) % k);
        }
        offset = (offset + members.len()) % k;
    }
    Ok(())
}

/// `counts[fold][class]`.
pub fn fold_class_counts(cohort: &Cohort, k: usize) -> Vec<Vec<usize>> {
    let c = cohort.n_classes().max(1);
    let mut counts = vec![vec![0; c]; k];
    for s in &cohort.slides {
        if let (Some(f), Some(l)) = (s.fold, s.label) {
            if f < k && l < c {
                counts[f][l] += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::types::{Magnification, PatchEmbedding, SlideBag};

    fn cohort(class_sizes: &[usize]) -> Cohort {
        let mut slides = Vec::new();
        for (c, &n) in class_sizes.iter().enumerate() {
            for j in 0..n {
                let mut s = SlideBag::new(
                    format!("c{c}-{j}"),
                    vec![PatchEmbedding { x: 0, y: 0, level: Magnification::X20, features: vec![0.0] }],
                );
                s.label = Some(c);
                slides.push(s);
            }
        }
        Cohort {
            name: "f".into(),
            dim: 1,
            class_names: (0..class_sizes.len()).map(|c| c.to_string()).collect(),
            slides,
            task_kind: TaskKind::Classification,
        }
    }

    #[test]
    fn ten_slides_five_folds() {
        let mut c = cohort(&[5, 5]);
        assign_folds(&mut c, 5, 1).unwrap();
        for row in fold_class_counts(&c, 5) {
            assert_eq!(row, vec![1, 1]);
        }
    }

    #[test]
    fn imbalanced_counts_by_enumeration() {
        let mut c = cohort(&[40, 30, 20, 10]);
        assign_folds(&mut c, 5, 77).unwrap();
        for row in fold_class_counts(&c, 5) {
            assert_eq!(row, vec![8, 6, 4, 2]);
        }
    }

    #[test]
    fn deterministic_and_partition() {
        let mut a = cohort(&[13, 7, 9]);
        let mut b = a.clone();
        assign_folds(&mut a, 3, 5).unwrap();
        assign_folds(&mut b, 3, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.slides.iter().all(|s| s.fold.unwrap() < 3));
        let counts = fold_class_counts(&a, 3);
        for class in 0..3 {
            let col: Vec<usize> = counts.iter().map(|r| r[class]).collect();
            assert!(col.iter().max().unwrap() - col.iter().min().unwrap() <= 1);
        }
        let sizes: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut c = cohort(&[13, 7, 9]);
        assign_folds(&mut c, 3, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_class() {
        let mut c = cohort(&[10, 3]);
        assert!(matches!(assign_folds(&mut c, 5, 0), Err(Error::Unsatisfiable(_))));
        assert!(assign_folds(&mut c, 1, 0).is_err());
    }

    #[test]
    fn split_roles() {
        let mut c = cohort(&[10, 10]);
        assign_folds(&mut c, 5, 0).unwrap();
        let s = c.split(4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12, 4, 4));
        assert!(s.test.iter().all(|&i| c.slides[i].fold == Some(4)));
        assert!(s.val.iter().all(|&i| c.slides[i].fold == Some(0)));
    }
}
