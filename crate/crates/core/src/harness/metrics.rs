use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of samples whose true class is among the first `k` entries of
/// its ranking.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != labels.len() {
        return Err(Error::invalid(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut hits = 0usize;
    for (ranking, &label) in rankings.iter().zip(labels) {
        if ranking.len() < k {
            return Err(Error::invalid(format!("k = {k} exceeds a ranking of length {}", ranking.len())));
        }
        hits += usize::from(ranking[..k].contains(&label));
    }
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    /// Top-1 accuracy indexed by class id.
    pub per_class: Vec<f64>,
    /// The same values sorted in descending order.
    pub sorted_desc: Vec<f64>,
}

pub fn per_class_accuracy(rankings: &[Vec<usize>], labels: &[usize], n_classes: usize) -> Result<PerClassAccuracy> {
    if rankings.len() != labels.len() {
        return Err(Error::invalid(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (ranking, &label) in rankings.iter().zip(labels) {
        if label >= n_classes {
            return Err(Error::InvalidLabel { label, max: n_classes });
        }
        let top = ranking.first().ok_or_else(|| Error::invalid("empty ranking"))?;
        totals[label] += 1;
        hits[label] += usize::from(*top == label);
    }
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::dataset(format!("class {c} has no test samples")));
    }
    let per_class: Vec<f64> = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect();
    let mut sorted_desc = per_class.clone();
    sorted_desc.sort_by(|a, b| b.total_cmp(a));
    Ok(PerClassAccuracy { per_class, sorted_desc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_topk() {
        let rankings = vec![vec![4, 0, 1, 2, 3, 5, 6, 7], vec![0, 1, 4, 2, 3, 5, 6, 7], vec![0, 1, 2, 3, 5, 6, 4, 7]];
        let labels = [4, 4, 4];
        assert!((topk_accuracy(&rankings, &labels, 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(topk_accuracy(&rankings, &labels, 8).unwrap(), 1.0);
        assert!(topk_accuracy(&rankings, &labels, 9).is_err());
        assert!(topk_accuracy(&rankings, &labels, 0).is_err());
    }

    #[test]
    fn per_class_counts() {
        let rankings = vec![vec![0, 1], vec![1, 0], vec![1, 0], vec![1, 0]];
        let labels = [0, 0, 1, 1];
        let acc = per_class_accuracy(&rankings, &labels, 2).unwrap();
        assert_eq!(acc.per_class, vec![0.5, 1.0]);
        assert_eq!(acc.sorted_desc, vec![1.0, 0.5]);
        assert!(matches!(per_class_accuracy(&rankings, &labels, 3), Err(Error::InvalidDataset(_))));
    }
}
