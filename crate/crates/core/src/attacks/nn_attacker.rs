use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::PredictionRecord;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::{sgd_step, Activation, Model, ModelSpec, Mode, OptimizerConfig, OptimizerState};
use crate::srcm::HeadDesign;

/// Largest number of sorted probabilities fed to the attacker.
pub const MAX_FEATURES: usize = 100;
pub const HIDDEN: [usize; 3] = [128, 64, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: 0.2,
        }
    }
}

/// Binary membership classifier over sorted confidence vectors.
#[derive(Debug, Clone)]
pub struct AttackerNet {
    model: Model,
    feature_width: usize,
}

/// Probabilities sorted in descending order, cut or zero-padded to `width`.
pub fn attack_features(probs: &[f64], width: usize) -> Vec<f64> {
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.resize(width, 0.0);
    sorted
}

fn feature_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = rows.map(|p| attack_features(p, width)).collect();
    Matrix::from_rows(&rows)
}

/// Mean of `softplus(z) − y·z` and its gradient `(σ(z) − y)/N`.
fn logistic_loss(z: &Matrix, y: &[f64]) -> (f64, Matrix) {
    let n = y.len() as f64;
    let mut grad = Matrix::zeros(z.rows(), 1);
    let mut loss = 0.0;
    for (r, &t) in y.iter().enumerate() {
        let v = z.get(r, 0);
        let softplus = v.max(0.0) + (-v.abs()).exp().ln_1p();
        loss += softplus - t * v;
        let sig = 1.0 / (1.0 + (-v).exp());
        grad.set(r, 0, (sig - t) / n);
    }
    (loss / n, grad)
}

/// Trains the membership classifier on shadow records with known membership.
pub fn train_nn_attacker(
    records: &[PredictionRecord],
    cfg: &AttackerConfig,
    seed: u64,
) -> Result<AttackerNet> {
    let first = records
        .first()
        .ok_or_else(|| LabError::Input("no shadow records to train the attacker on".into()))?;
    let members = records.iter().filter(|r| r.is_member).count();
    if members == 0 || members == records.len() {
        return Err(LabError::Training(
            "attacker training data holds a single membership class".into(),
        ));
    }
    let width = first.probs.len().min(MAX_FEATURES);
    if width == 0 {
        return Err(LabError::Input("empty probability vectors".into()));
    }
    let x = feature_matrix(records.iter().map(|r| r.probs.as_slice()), width)?;
    let y: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.is_member))).collect();

    let spec = ModelSpec {
        input_width: width,
        hidden: HIDDEN.to_vec(),
        activation: Activation::Relu,
        dropout: cfg.dropout,
        head: HeadDesign::Vanilla,
        srcm: None,
        num_classes: 1,
    };
    let mut model = Model::build(&spec, seed)?;
    let mut opt = OptimizerState::new(
        &model,
        &OptimizerConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6174_7461_636b);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select_rows(chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let pass = model.forward_with(&xb, Mode::Train, Some(&mut rng))?;
            let (loss, grad) = logistic_loss(pass.logits(), &yb);
            if !loss.is_finite() {
                return Err(LabError::Training("attacker loss diverged".into()));
            }
            let (grads, _) = model.backward(&pass, &grad, false)?;
            sgd_step(&mut model, &grads, &mut opt)?;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(AttackerNet {
        model,
        feature_width: width,
    })
}

impl AttackerNet {
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Membership logits, one per probability row; higher means more member-like.
    pub fn score_rows<'a>(&self, probs: impl Iterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        let x = feature_matrix(probs, self.feature_width)?;
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.model.predict_logits(&x)?.into_vec())
    }

    pub fn score_records(&self, records: &[PredictionRecord]) -> Result<Vec<f64>> {
        self.score_rows(records.iter().map(|r| r.probs.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_sorted_and_sized() {
        assert_eq!(attack_features(&[0.1, 0.7, 0.2], 3), vec![0.7, 0.2, 0.1]);
        assert_eq!(attack_features(&[0.1, 0.7, 0.2], 2), vec![0.7, 0.2]);
        assert_eq!(attack_features(&[0.4, 0.6], 3), vec![0.6, 0.4, 0.0]);
    }

    #[test]
    fn logistic_gradient_matches_finite_difference() {
        let z = Matrix::from_rows(&[vec![0.3], vec![-2.0], vec![4.0]]).unwrap();
        let y = [1.0, 0.0, 1.0];
        let (_, g) = logistic_loss(&z, &y);
        let h = 1e-6;
        for r in 0..3 {
            let mut zp = z.clone();
            zp.set(r, 0, z.get(r, 0) + h);
            let mut zm = z.clone();
            zm.set(r, 0, z.get(r, 0) - h);
            let fd = (logistic_loss(&zp, &y).0 - logistic_loss(&zm, &y).0) / (2.0 * h);
            assert!((fd - g.get(r, 0)).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            train_nn_attacker(&[], &AttackerConfig::default(), 0),
            Err(LabError::Input(_))
        ));
        let one_class: Vec<PredictionRecord> = (0..4)
            .map(|i| PredictionRecord::new(i, vec![0.5, 0.5], 0, true, 1.0))
            .collect();
        assert!(matches!(
            train_nn_attacker(&one_class, &AttackerConfig::default(), 0),
            Err(LabError::Training(_))
        ));
    }
}
