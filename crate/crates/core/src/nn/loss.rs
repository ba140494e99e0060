use crate::error::{LabError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    pub probs: Matrix,
    /// Gradient of the mean loss with respect to the logits.
    pub dlogits: Matrix,
}

/// Row-wise softmax with the row maximum subtracted before exponentiating.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    probs
}

/// Replaces `row` by its softmax and returns log Σ exp(row).
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

pub(crate) fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(LabError::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(LabError::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(LabError::Input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    if !logits.is_finite() {
        return Err(LabError::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Mean cross-entropy of `labels` under `softmax(logits)`, with `dlogits = (p − onehot)/N`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z_y = logits.get(r, y);
        let lse = softmax_in_place(probs.row_mut(r));
        total += lse - z_y;
    }
    let mut dlogits = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(LossOutput {
        loss: total / n,
        probs,
        dlogits,
    })
}
