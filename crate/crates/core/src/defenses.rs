//! Baseline membership-privacy defenses: label smoothing, confidence penalty
//! and early stopping. The first two replace the training loss; early
//! stopping is handled by the training loop through [`early_stopping_check`].

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::loss::{check_labels, softmax_in_place};
use crate::nn::{softmax_cross_entropy, LossOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    #[default]
    None,
    LabelSmoothing {
        epsilon: f64,
    },
    ConfidencePenalty {
        beta: f64,
    },
    EarlyStopping {
        patience: usize,
        min_delta: f64,
    },
}

impl DefenseConfig {
    pub const DEFAULT_EPSILON: f64 = 0.1;
    pub const DEFAULT_BETA: f64 = 0.1;
    pub const DEFAULT_PATIENCE: usize = 10;

    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::LabelSmoothing { .. } => "label_smoothing",
            DefenseConfig::ConfidencePenalty { .. } => "confidence_penalty",
            DefenseConfig::EarlyStopping { .. } => "early_stopping",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseConfig::LabelSmoothing { epsilon } if !(0.0..1.0).contains(&epsilon) => {
                Err(LabError::config("epsilon", "must be in [0, 1)"))
            }
            DefenseConfig::ConfidencePenalty { beta } if !(beta.is_finite() && beta >= 0.0) => {
                Err(LabError::config("beta", "must be >= 0"))
            }
            DefenseConfig::EarlyStopping { patience: 0, .. } => {
                Err(LabError::config("patience", "must be >= 1"))
            }
            DefenseConfig::EarlyStopping { min_delta, .. } if min_delta.is_nan() || min_delta < 0.0 => {
                Err(LabError::config("min_delta", "must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Training loss under this defense. Early stopping trains on plain cross-entropy.
    pub fn loss(&self, logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
        match *self {
            DefenseConfig::LabelSmoothing { epsilon } => {
                label_smoothing_loss(logits, labels, epsilon)
            }
            DefenseConfig::ConfidencePenalty { beta } => {
                confidence_penalty_loss(logits, labels, beta)
            }
            DefenseConfig::None | DefenseConfig::EarlyStopping { .. } => {
                softmax_cross_entropy(logits, labels)
            }
        }
    }
}

/// Targets `1 − ε + ε/C` on the true class and `ε/C` elsewhere. The last
/// entry absorbs rounding (at most one ulp of 1) so the left-to-right sum is
/// exactly 1.
pub fn smoothed_targets(label: usize, classes: usize, epsilon: f64) -> Vec<f64> {
    let off = epsilon / classes as f64;
    let mut t = vec![off; classes];
    t[label] = (1.0 - epsilon) + off;
    let last = classes - 1;
    let prefix: f64 = t[..last].iter().sum();
    t[last] = (1.0 - prefix).max(0.0);
    t
}

/// Cross-entropy against smoothed targets; `dlogits = (p − t)/N`.
pub fn label_smoothing_loss(logits: &Matrix, labels: &[usize], epsilon: f64) -> Result<LossOutput> {
    DefenseConfig::LabelSmoothing { epsilon }.validate()?;
    check_labels(logits, labels)?;
    let n = logits.rows() as f64;
    let classes = logits.cols();
    let mut probs = logits.clone();
    let mut dlogits = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let lse = softmax_in_place(probs.row_mut(r));
        let t = smoothed_targets(y, classes, epsilon);
        let z = logits.row(r);
        // −Σ t_i log p_i with log p_i = z_i − lse
        let mut row_loss = 0.0;
        for (ti, zi) in t.iter().zip(z) {
            if *ti != 0.0 {
                row_loss += ti * (lse - zi);
            }
        }
        total += row_loss;
        for ((d, p), ti) in dlogits.row_mut(r).iter_mut().zip(probs.row(r)).zip(&t) {
            *d = (p - ti) / n;
        }
    }
    Ok(LossOutput {
        loss: total / n,
        probs,
        dlogits,
    })
}

/// `CE − β·H(p)`. With `log p_j = z_j − lse`, `∂H/∂z_j = −p_j (log p_j + H)`.
pub fn confidence_penalty_loss(logits: &Matrix, labels: &[usize], beta: f64) -> Result<LossOutput> {
    DefenseConfig::ConfidencePenalty { beta }.validate()?;
    let mut out = softmax_cross_entropy(logits, labels)?;
    let n = logits.rows() as f64;
    let mut entropy_sum = 0.0;
    for r in 0..logits.rows() {
        let z = logits.row(r);
        let p = out.probs.row(r);
        let lse = {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        };
        let h: f64 = -p
            .iter()
            .zip(z)
            .map(|(pi, zi)| if *pi > 0.0 { pi * (zi - lse) } else { 0.0 })
            .sum::<f64>();
        entropy_sum += h;
        for ((d, pi), zi) in out.dlogits.row_mut(r).iter_mut().zip(p).zip(z) {
            *d += beta * pi * ((zi - lse) + h) / n;
        }
    }
    out.loss -= beta * (entropy_sum / n);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Stop once `patience` epochs have passed without beating the best
/// accuracy by more than `min_delta`.
pub fn early_stopping_check(history: &[f64], patience: usize, min_delta: f64) -> StopDecision {
    let Some(&first) = history.first() else {
        return StopDecision::Continue;
    };
    let (mut best, mut best_epoch) = (first, 0);
    for (i, &acc) in history.iter().enumerate().skip(1) {
        if acc > best + min_delta {
            best = acc;
            best_epoch = i;
        }
    }
    if history.len() - 1 - best_epoch >= patience.max(1) {
        StopDecision::Stop { best_epoch }
    } else {
        StopDecision::Continue
    }
}
