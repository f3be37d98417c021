//! Accuracy and Mann-Whitney AUC.

use crate::data::Label;
use crate::error::{Error, Result};

/// Fraction of subjects whose argmax class equals the label. Ties go to
/// class 0.
pub fn compute_accuracy(probs: &[[f64; 2]], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let pred = if p[1] > p[0] { Label::Patient } else { Label::Control };
            pred == l
        })
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// `(wins + ties / 2) / (n_pos * n_neg)` computed in `O(n log n)` by
/// sweeping score-sorted groups.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Range("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Patient).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            match labels[order[j]] {
                Label::Patient => pos += 1,
                Label::Control => neg += 1,
            }
            j += 1;
        }
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Control as N, Patient as P};

    #[test]
    fn accuracy_examples() {
        let probs = [[0.9, 0.1], [0.2, 0.8], [0.4, 0.6], [0.7, 0.3]];
        assert_eq!(compute_accuracy(&probs, &[N, P, P, N]).unwrap(), 1.0);
        assert_eq!(compute_accuracy(&probs, &[P, N, N, P]).unwrap(), 0.0);
        assert_eq!(compute_accuracy(&probs, &[N, P, P, P]).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_tie_goes_to_control() {
        assert_eq!(compute_accuracy(&[[0.5, 0.5]], &[N]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_errors() {
        assert!(compute_accuracy(&[], &[]).is_err());
        assert!(compute_accuracy(&[[0.5, 0.5]], &[N, P]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.1, 0.9], &[N, P]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.3; 6], &[N, P, N, P, P, N]).unwrap(), 0.5);
        assert_eq!(compute_auc(&[0.7, 0.3, 0.9], &[N, P, P]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(compute_auc(&[0.1, 0.2], &[P, P]).is_err());
    }
}
