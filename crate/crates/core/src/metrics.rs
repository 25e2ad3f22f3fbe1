//! Classification metrics: confusion matrix, per-class precision/recall/F1,
//! and support-weighted aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision, recall, and F1 for one class, plus its true-label count.
///
/// Any ratio with a zero denominator is reported as `0.0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of evaluation samples whose true label is this class.
    pub support: usize,
}

/// Full evaluation summary over one labelled sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// One entry per class, indexed by class id.
    pub per_class: Vec<ClassMetrics>,
    /// Per-class metrics averaged with weights proportional to support.
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// `confusion[t][p]` counts samples with true class `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
}

/// Count (true, predicted) pairs into a `classes x classes` matrix.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::InvalidInput(format!(
            "label count {} does not match prediction count {}",
            truth.len(),
            predicted.len()
        )));
    }
    let mut matrix = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidInput(format!(
                "label pair ({t}, {p}) is out of range for {classes} classes"
            )));
        }
        matrix[t][p] += 1;
    }
    Ok(matrix)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// Compute accuracy, the confusion matrix, and per-class plus
/// support-weighted precision/recall/F1 from paired labels.
pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<EvalMetrics> {
    if truth.is_empty() {
        return Err(Error::Empty("evaluation sample set"));
    }
    if classes == 0 {
        return Err(Error::InvalidInput("need at least one class".into()));
    }
    let confusion = confusion_matrix(truth, predicted, classes)?;
    let total = truth.len();
    let mut correct = 0;
    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        correct += confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted_k: usize = (0..classes).map(|t| confusion[t][k]).sum();
        let precision = ratio(confusion[k][k], predicted_k);
        let recall = ratio(confusion[k][k], support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, support });
    }
    let weight = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    Ok(EvalMetrics {
        accuracy: correct as f64 / total as f64,
        weighted_precision: weight(|m| m.precision),
        weighted_recall: weight(|m| m.recall),
        weighted_f1: weight(|m| m.f1),
        per_class,
        confusion,
    })
}
