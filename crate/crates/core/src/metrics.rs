//! Training losses and evaluation metrics for single- and multi-label graphs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_bce, softmax_cross_entropy, Tensor, TensorError, Var};
use crate::graph::{Graph, Labels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MicroF1,
}

impl MetricKind {
    pub fn for_labels(labels: &Labels) -> Self {
        match labels {
            Labels::Single(_) => MetricKind::Accuracy,
            Labels::Multi(_) => MetricKind::MicroF1,
        }
    }
}

/// Mean cross-entropy (single-label) or mean binary cross-entropy
/// (multi-label) over the masked rows.
pub fn loss<'t>(logits: Var<'t>, graph: &Graph, mask: &[bool]) -> Result<Var<'t>, TensorError> {
    match graph.labels() {
        Labels::Single(l) => softmax_cross_entropy(logits, l, mask),
        Labels::Multi(t) => sigmoid_bce(logits, t, mask),
    }
}

/// Accuracy or micro-F1 of `logits` on the masked rows.
pub fn metric(logits: &Tensor, labels: &Labels, mask: &[bool]) -> Result<f64, TensorError> {
    match labels {
        Labels::Single(l) => accuracy(logits, l, mask),
        Labels::Multi(t) => micro_f1(logits, t, mask),
    }
}

fn check_rows(logits: &Tensor, mask: &[bool]) -> Result<(), TensorError> {
    if logits.rank() != 2 || logits.rows() != mask.len() {
        return Err(TensorError::Invalid(format!(
            "logits of shape {:?} do not match a mask over {} nodes",
            logits.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::EmptyMask);
    }
    Ok(())
}

/// Fraction of masked rows whose argmax (lowest index on ties) is the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64, TensorError> {
    check_rows(logits, mask)?;
    let pred = logits.argmax_rows();
    let (mut hit, mut total) = (0usize, 0usize);
    for v in (0..mask.len()).filter(|&v| mask[v]) {
        total += 1;
        hit += usize::from(pred[v] == labels[v]);
    }
    Ok(hit as f64 / total as f64)
}

/// Micro-averaged F1 with predictions `sigmoid(logit) > 0.5`. When there are
/// no positives among predictions and targets alike the score is 1.
pub fn micro_f1(logits: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<f64, TensorError> {
    check_rows(logits, mask)?;
    if targets.shape() != logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "micro_f1",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for v in (0..mask.len()).filter(|&v| mask[v]) {
        for (&z, &y) in logits.row(v).iter().zip(targets.row(v)) {
            match (z > 0.0, y > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}
