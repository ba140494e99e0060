use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax, Model, Mode};

/// Floor applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(LabError::Input("empty probability vector".into()));
    }
    if let Some(v) = p.iter().find(|v| v.is_nan() || **v < 0.0 || !v.is_finite()) {
        return Err(LabError::Input(format!("invalid probability {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(LabError::Input(format!("probabilities sum to {s}")));
    }
    Ok(())
}

#[inline]
fn safe_ln(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

/// Negative prediction entropy `Σ p ln p` (with `0 ln 0 = 0`); confident rows score higher.
pub fn entropy_score(p: &[f64]) -> Result<f64> {
    check_probs(p)?;
    Ok(p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum())
}

/// Negative modified entropy:
/// `Mentr(p, y) = −(1−p_y) ln p_y − Σ_{i≠y} p_i ln(1−p_i)`, score `= −Mentr`.
pub fn mentropy_score(p: &[f64], y: usize) -> Result<f64> {
    check_probs(p)?;
    if y >= p.len() {
        return Err(LabError::Input(format!("label {y} out of range for {} classes", p.len())));
    }
    let mut mentr = -(1.0 - p[y]) * safe_ln(p[y]);
    for (i, &pi) in p.iter().enumerate() {
        if i != y {
            mentr -= pi * safe_ln(1.0 - pi);
        }
    }
    Ok(-mentr)
}

/// `−‖∇ₓ CE(F(x), y)‖₂` for each row of `x`. The model must be in evaluation mode.
pub fn gradx_l2_scores(model: &Model, x: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if model.mode != Mode::Eval {
        return Err(LabError::State("gradient scores need an evaluation-mode model".into()));
    }
    if labels.len() != x.rows() {
        return Err(LabError::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            x.rows()
        )));
    }
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(x.rows());
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = x.select_rows(chunk);
        let pass = model.forward_with(&batch, Mode::Eval, None)?;
        // per-sample loss gradient: rows are independent, so no 1/N scaling
        let mut dlogits = softmax(pass.logits());
        for (r, &i) in chunk.iter().enumerate() {
            let y = labels[i];
            if y >= dlogits.cols() {
                return Err(LabError::Input(format!("label {y} out of range")));
            }
            dlogits.row_mut(r)[y] -= 1.0;
        }
        let (_, dx) = model.backward(&pass, &dlogits, true)?;
        let dx = dx.expect("input gradient requested");
        out.extend(dx.row_iter().map(|r| -r.iter().map(|v| v * v).sum::<f64>().sqrt()));
    }
    Ok(out)
}

/// Single-sample form of [`gradx_l2_scores`].
pub fn gradx_l2_score(model: &Model, x: &[f64], y: usize) -> Result<f64> {
    Ok(gradx_l2_scores(model, &Matrix::row_vector(x), &[y])?[0])
}
