//! Dataset-level evaluation: per-dimension concordance correlation for the
//! regression head, macro F1 and accuracy (plus the confusion matrix) for the
//! region classifier. All statistics are computed over the whole evaluation
//! split in one pass, never averaged over batches.

use crate::losses::{ccc, LossError};
use crate::tensor::Tensor;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("prediction shape {pred:?} does not match target shape {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("{0} predicted labels vs {1} true labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Metrics over one evaluation split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ccc_v: f64,
    pub ccc_a: f64,
    pub ccc_d: f64,
    pub ccc_mean: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn new(
        pred: &Tensor,
        target: &Tensor,
        pred_labels: &[usize],
        true_labels: &[usize],
        n_classes: usize,
    ) -> Result<Self, MetricsError> {
        let (ccc_v, ccc_a, ccc_d, ccc_mean) = evaluate_regression(pred, target)?;
        let (macro_f1, accuracy, confusion) =
            evaluate_classification(pred_labels, true_labels, n_classes)?;
        Ok(EvalReport {
            ccc_v,
            ccc_a,
            ccc_d,
            ccc_mean,
            macro_f1,
            accuracy,
            confusion,
        })
    }

    /// Flat `key = value` text rendering; one metric per line.
    pub fn to_kv_text(&self) -> String {
        format!(
            "ccc_v = {}\nccc_a = {}\nccc_d = {}\nccc_mean = {}\nmacro_f1 = {}\naccuracy = {}\n",
            self.ccc_v, self.ccc_a, self.ccc_d, self.ccc_mean, self.macro_f1, self.accuracy
        )
    }

    /// JSON rendering including the confusion matrix.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-dimension CCC over the full split, plus the arithmetic mean.
pub fn evaluate_regression(
    pred: &Tensor,
    target: &Tensor,
) -> Result<(f64, f64, f64, f64), MetricsError> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 || pred.shape()[1] != 3 {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let m = pred.shape()[0];
    if m < 2 {
        return Err(MetricsError::TooFewSamples(m));
    }
    let column = |t: &Tensor, dim: usize| (0..m).map(|s| t.get2(s, dim)).collect::<Vec<f64>>();
    let ccc_v = ccc(&column(pred, 0), &column(target, 0))?;
    let ccc_a = ccc(&column(pred, 1), &column(target, 1))?;
    let ccc_d = ccc(&column(pred, 2), &column(target, 2))?;
    Ok((ccc_v, ccc_a, ccc_d, (ccc_v + ccc_a + ccc_d) / 3.0))
}

/// Accuracy, macro F1 and the confusion matrix.
///
/// Macro F1 averages per-class F1 over the classes that occur in the truth
/// or the predictions; classes absent from both are excluded, and a class
/// with zero precision and recall contributes an F1 of 0.
pub fn evaluate_classification(
    pred_labels: &[usize],
    true_labels: &[usize],
    n_classes: usize,
) -> Result<(f64, f64, Vec<Vec<u64>>), MetricsError> {
    if pred_labels.len() != true_labels.len() {
        return Err(MetricsError::LengthMismatch(
            pred_labels.len(),
            true_labels.len(),
        ));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred_labels.iter().zip(true_labels) {
        for label in [p, t] {
            if label >= n_classes {
                return Err(MetricsError::LabelOutOfRange {
                    label,
                    n_classes,
                });
            }
        }
        confusion[t][p] += 1;
    }

    let total: u64 = pred_labels.len() as u64;
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };

    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let truth_count: u64 = confusion[c].iter().sum();
        let pred_count: u64 = (0..n_classes).map(|t| confusion[t][c]).sum();
        if truth_count == 0 && pred_count == 0 {
            continue;
        }
        f1_classes += 1;
        let denom = truth_count as f64 + pred_count as f64;
        if denom > 0.0 && tp > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
        // tp == 0 with any support contributes F1 = 0.
    }
    let macro_f1 = if f1_classes == 0 {
        0.0
    } else {
        f1_sum / f1_classes as f64
    };
    Ok((macro_f1, accuracy, confusion))
}
