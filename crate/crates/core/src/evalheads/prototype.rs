use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeIndex {
    /// C×M, row `c` is the mean embedding of class `c`.
    pub prototypes: DenseMatrix,
    pub class_names: Vec<String>,
}

pub fn build_prototypes(features: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<PrototypeIndex> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features vs {} labels", features.len(), labels.len())));
    }
    let c = class_names.len();
    let dim = features.first().map(|f| f.len()).ok_or_else(|| Error::InvalidInput("no features".into()))?;
    let mut sums = DenseMatrix::zeros(c, dim);
    let mut counts = vec![0usize; c];
    for (f, &l) in features.iter().zip(labels) {
        if f.len() != dim {
            return Err(Error::Shape(format!("feature length {} vs {dim}", f.len())));
        }
        if l >= c {
            return Err(Error::InvalidInput(format!("label {l} with {c} classes")));
        }
        counts[l] += 1;
        crate::numerics::axpy(1.0, f, sums.row_mut(l));
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {:?} has no embeddings", class_names[empty])));
    }
    for (r, &n) in counts.iter().enumerate() {
        sums.row_mut(r).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(PrototypeIndex { prototypes: sums, class_names: class_names.to_vec() })
}

/// Cosine similarity, 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 { 0.0 } else { dot(a, b) / (na * nb) }
}

/// Class of the most similar prototype (lowest index on ties) and all
/// similarities.
pub fn classify_by_prototype(query: &[f64], index: &PrototypeIndex) -> Result<(usize, Vec<f64>)> {
    if query.len() != index.prototypes.cols() {
        return Err(Error::Shape(format!("query dim {} vs prototype dim {}", query.len(), index.prototypes.cols())));
    }
    let sims: Vec<f64> = (0..index.prototypes.rows()).map(|c| cosine(query, index.prototypes.row(c))).collect();
    Ok((crate::numerics::argmax(&sims), sims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub class: String,
    pub rank: usize,
    pub candidate_id: String,
    pub similarity: f64,
}

/// Top `k` candidates by cosine similarity to a class prototype; ties go to
/// the smaller id.
pub fn topk_nearest_to_prototype(
    index: &PrototypeIndex,
    class: usize,
    k: usize,
    candidates: &[(String, Vec<f64>)],
) -> Result<Vec<RetrievalHit>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no retrieval candidates".into()));
    }
    if class >= index.prototypes.rows() {
        return Err(Error::InvalidInput(format!("class {class} out of range")));
    }
    if k > candidates.len() {
        return Err(Error::InvalidInput(format!("k = {k} exceeds {} candidates", candidates.len())));
    }
    let proto = index.prototypes.row(class);
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, f) in candidates {
        if f.len() != proto.len() {
            return Err(Error::Shape(format!("candidate {id}: dim {} vs {}", f.len(), proto.len())));
        }
        scored.push((cosine(f, proto), id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (s, id))| RetrievalHit {
            class: index.class_names[class].clone(),
            rank: r + 1,
            candidate_id: id.clone(),
            similarity: s,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn means() {
        let idx = build_prototypes(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.5, 7.0]], &[0, 0, 1], &names(2)).unwrap();
        assert_eq!(idx.prototypes.row(0), &[2.0, 0.0]);
        assert_eq!(idx.prototypes.row(1), &[0.5, 7.0]);
        let mut rng = RngStream::new(1, 0);
        let v: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.standard_normal()).collect()).collect();
        let idx = build_prototypes(&v, &[0, 0, 0], &names(1)).unwrap();
        for j in 0..4 {
            assert_eq!(idx.prototypes.get(0, j), (v[0][j] + v[1][j] + v[2][j]) / 3.0);
        }
        assert!(build_prototypes(&v, &[0, 0, 0], &names(2)).is_err());
    }

    #[test]
    fn classification_rules() {
        let idx = build_prototypes(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 0.0]], &[0, 1, 2], &names(3)).unwrap();
        assert_eq!(classify_by_prototype(&[1.0, 1.0, 0.0], &idx).unwrap().0, 2);
        let (c, s) = classify_by_prototype(&[0.0, 0.0, 2.0], &idx).unwrap();
        assert_eq!((c, s), (0, vec![0.0; 3]));
        let (c1, _) = classify_by_prototype(&[0.3, 0.9, 0.0], &idx).unwrap();
        let (c2, _) = classify_by_prototype(&[3.0, 9.0, 0.0], &idx).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn brute_force_cosines_and_retrieval() {
        let mut rng = RngStream::new(2, 0);
        let feats: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| rng.standard_normal()).collect()).collect();
        let idx = build_prototypes(&feats, &[0, 1, 2, 3, 0, 1, 2, 3], &names(4)).unwrap();
        let q: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let (_, sims) = classify_by_prototype(&q, &idx).unwrap();
        for c in 0..4 {
            let p = idx.prototypes.row(c);
            let manual = q.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
                / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * p.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!((sims[c] - manual).abs() < 1e-15);
        }

        let mut cands: Vec<(String, Vec<f64>)> =
            (0..20).map(|i| (format!("cand-{i:02}"), (0..5).map(|_| rng.standard_normal()).collect())).collect();
        cands.push(("self".into(), idx.prototypes.row(1).to_vec()));
        let hits = topk_nearest_to_prototype(&idx, 1, 5, &cands).unwrap();
        assert_eq!(hits[0].candidate_id, "self");
        let mut all: Vec<(f64, String)> = cands.iter().map(|(id, f)| (cosine(f, idx.prototypes.row(1)), id.clone())).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let want: Vec<&str> = all.iter().take(5).map(|a| a.1.as_str()).collect();
        let got: Vec<&str> = hits.iter().map(|h| h.candidate_id.as_str()).collect();
        assert_eq!(got, want);
        assert_eq!(topk_nearest_to_prototype(&idx, 1, 21, &cands).unwrap().len(), 21);
        assert!(topk_nearest_to_prototype(&idx, 1, 22, &cands).is_err());
    }
}
