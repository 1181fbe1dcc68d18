//! Binary classification metrics.
//!
//! Scores are probabilities of the positive class (PD). The decision
//! threshold applies as `score >= threshold`. Ratios with an empty
//! denominator (no predicted positives, single-class folds) report 0; AUC
//! is the one metric that stays undefined (`None`) when only one class is
//! present, since no ranking statement is possible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 6] = [
        "accuracy",
        "f1",
        "precision",
        "auc",
        "sensitivity",
        "specificity",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "f1" => Some(self.f1),
            "auc" => self.auc,
            "sensitivity" => Some(self.sensitivity),
            "specificity" => Some(self.specificity),
            _ => None,
        }
    }
}

/// Computes the six evaluation metrics from positive-class scores and
/// binary labels.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricSet> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "metrics need matched nonempty scores/labels, got {} / {}",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fne);
    let specificity = ratio(tn, tn + fp);
    let f1 = if precision + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    Ok(MetricSet {
        accuracy,
        precision,
        f1,
        auc: auc_roc(scores, labels),
        sensitivity,
        specificity,
    })
}

/// Rank-based AUC-ROC. Equivalent to the pairwise formulation with ties
/// counted as one half: tied scores get average ranks. Returns `None` when
/// only one class is present.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// O(N^2) pairwise oracle with ties counted as one half.
    fn auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(s, _)| *s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut num = 0.0;
        for p in &pos {
            for q in &neg {
                if p > q {
                    num += 1.0;
                } else if p == q {
                    num += 0.5;
                }
            }
        }
        Some(num / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_separation_scores_all_ones() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.specificity, 1.0);
    }

    #[test]
    fn inverted_scores_give_auc_zero() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc_roc(&scores, &labels), Some(0.0));
    }

    #[test]
    fn frozen_auc_example() {
        // Pairwise count: (.35 > .1), (.35 < .4), (.8 > .1), (.8 > .4)
        // gives 3 of 4 concordant pairs.
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc_roc(&scores, &labels), Some(0.75));
        assert_eq!(auc_pairwise_oracle(&scores, &labels), Some(0.75));
    }

    #[test]
    fn single_class_auc_is_undefined_not_a_crash() {
        let scores = [0.3, 0.6, 0.9];
        let labels = [1, 1, 1];
        assert_eq!(auc_roc(&scores, &labels), None);
        let m = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.specificity, 0.0);
    }

    #[test]
    fn rank_auc_equals_pairwise_oracle_exactly() {
        let mut rng = SeededRng::new(99);
        for _ in 0..200 {
            let n = 2 + rng.below(30);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.below(12) as f64) / 10.0) // coarse grid forces ties
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
            assert_eq!(auc_roc(&scores, &labels), auc_pairwise_oracle(&scores, &labels));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(compute_metrics(&[], &[], 0.5).is_err());
        assert!(compute_metrics(&[0.5], &[2], 0.5).is_err());
        assert!(compute_metrics(&[0.5, 0.5], &[1], 0.5).is_err());
        assert!(compute_metrics(&[0.5, f64::NAN], &[0, 1], 0.5).is_err());
    }
}
