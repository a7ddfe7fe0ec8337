//! Accuracy, macro one-vs-rest AUC and macro F1.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Unweighted mean over classes that have both positives and negatives;
    /// 0.5 when no class qualifies.
    pub auc: f64,
    pub f1: f64,
    pub n: usize,
    /// Per-class `(true count, predicted count)`.
    pub class_counts: Vec<(usize, usize)>,
}

/// Argmax with ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest AUC by average ranks: ties between a positive and a negative
/// count ½. Returns `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied (half-integer) ranks exact.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_rank = (i + 1 + j + 1) as u64;
        twice_rank_sum += twice_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let p = n_pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Some(twice_u as f64 / 2.0 / (n_pos * n_neg) as f64)
}

pub fn compute_metrics(probs: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, k) = probs.dims2()?;
    if labels.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} probability rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} outside {k} classes")));
    }
    for i in 0..n {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("probability row {i} sums to {s}")));
        }
    }
    let preds: Vec<usize> = (0..n).map(|i| argmax(probs.row(i))).collect();
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let mut aucs = Vec::with_capacity(k);
    let mut f1 = 0.0;
    let mut class_counts = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| probs.get2(i, c)).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if let Some(a) = binary_auc(&scores, &positive) {
            aucs.push(a);
        }
        let tp = (0..n).filter(|&i| preds[i] == c && labels[i] == c).count();
        let predicted = preds.iter().filter(|&&p| p == c).count();
        let actual = positive.iter().filter(|&&p| p).count();
        let denom = predicted + actual;
        if denom > 0 {
            f1 += 2.0 * tp as f64 / denom as f64;
        }
        class_counts.push((actual, predicted));
    }
    let auc = if aucs.is_empty() { 0.5 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
    Ok(MetricsReport { accuracy: correct as f64 / n as f64, auc, f1: f1 / k as f64, n, class_counts })
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "split,n,accuracy,auc,f1"
    }

    pub fn csv_row(&self, split: &str) -> String {
        format!("{split},{},{:?},{:?},{:?}", self.n, self.accuracy, self.auc, self.f1)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n         {}", self.n)?;
        writeln!(f, "accuracy  {:.4}", self.accuracy)?;
        writeln!(f, "auc       {:.4}", self.auc)?;
        writeln!(f, "f1        {:.4}", self.f1)?;
        writeln!(f, "class  true  predicted")?;
        for (c, (t, p)) in self.class_counts.iter().enumerate() {
            writeln!(f, "{c:>5}  {t:>4}  {p:>9}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let m = compute_metrics(&p, &[0, 1, 2]).unwrap();
        assert_eq!((m.accuracy, m.auc, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn binary_example() {
        assert_eq!(binary_auc(&[0.9, 0.4, 0.35], &[true, false, true]), Some(0.5));
    }

    #[test]
    fn all_class_zero() {
        let p = Tensor::from_rows(&vec![vec![0.5, 0.25, 0.25]; 6]).unwrap();
        let m = compute_metrics(&p, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.class_counts, vec![(2, 6), (2, 0), (2, 0)]);
        // class 0: precision 1/3, recall 1 -> F1 1/2; others 0
        assert!((m.f1 - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(compute_metrics(&p, &[0]).unwrap().accuracy, 1.0);
    }

    #[test]
    fn errors() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(compute_metrics(&p, &[2]), Err(Error::Input(_))));
        let bad = Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap();
        assert!(matches!(compute_metrics(&bad, &[0]), Err(Error::Input(_))));
    }
}
