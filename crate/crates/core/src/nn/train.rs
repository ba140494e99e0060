use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defenses::{early_stopping_check, DefenseConfig, StopDecision};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::nn::model::Model;
use crate::nn::optim::{sgd_step, OptimizerState};
use crate::nn::Mode;

/// Features with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(LabError::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(LabeledData { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiply the learning rate by 0.1 at 50% and again at 75% of the epochs.
    pub step_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            step_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if !self.step_decay {
            return base;
        }
        let milestones = [self.epochs / 2, self.epochs * 3 / 4];
        let passed = milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        base * 0.1f64.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's minibatches, in training mode.
    pub train_acc: f64,
    pub monitor_loss: Option<f64>,
    pub monitor_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept when early stopping was active.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max logit is the label, evaluated in evaluation mode.
pub fn accuracy(model: &Model, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(LabError::Input("accuracy of an empty set".into()));
    }
    let logits = model.predict_logits(&data.features)?;
    let correct = logits
        .row_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn monitor_stats(model: &Model, data: &LabeledData, defense: &DefenseConfig) -> Result<(f64, f64)> {
    let logits = model.predict_logits(&data.features)?;
    let out = defense.loss(&logits, &data.labels)?;
    let correct = logits
        .row_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok((out.loss, correct as f64 / data.len() as f64))
}

/// Minibatch training with the loss chosen by `defense`.
///
/// `monitor` is an optional held-out set evaluated after every epoch; early
/// stopping requires it and restores the parameters of the best epoch.
/// Results depend only on `(model, data, config, seed)`.
pub fn train_epochs(
    model: &mut Model,
    train: &LabeledData,
    monitor: Option<&LabeledData>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    defense: &DefenseConfig,
    seed: u64,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(LabError::Input("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LabError::config("batch_size", "must be positive"));
    }
    defense.validate()?;
    let patience = match defense {
        DefenseConfig::EarlyStopping {
            patience,
            min_delta,
        } => {
            if monitor.is_none_or(LabeledData::is_empty) {
                return Err(LabError::Input("early stopping needs a monitor set".into()));
            }
            Some((*patience, *min_delta))
        }
        _ => None,
    };

    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }

    let restore_mode = model.mode;
    model.set_mode(Mode::Train);
    let base_lr = opt.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e_5f6c_6f67);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(base_lr, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let pass = model.forward_with(&x, Mode::Train, Some(&mut rng))?;
            let out = defense.loss(pass.logits(), &y)?;
            if !out.loss.is_finite() {
                return Err(LabError::Training(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out
                .probs
                .row_iter()
                .zip(&y)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            let (grads, _) = model.backward(&pass, &out.dlogits, false)?;
            sgd_step(model, &grads, opt)?;
        }

        let (monitor_loss, monitor_acc) = match monitor {
            Some(m) if !m.is_empty() => {
                let (l, a) = monitor_stats(model, m, defense)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            monitor_loss,
            monitor_acc,
        });

        if let (Some((patience, min_delta)), Some(acc)) = (patience, monitor_acc) {
            history.push(acc);
            let improved = best
                .as_ref()
                .is_none_or(|(best_acc, _, _)| acc > best_acc + min_delta);
            if improved {
                best = Some((acc, epoch, model.clone()));
            }
            if let StopDecision::Stop { .. } = early_stopping_check(&history, patience, min_delta) {
                log.stopped_early = true;
                break;
            }
        }
    }

    if let Some((_, epoch, snapshot)) = best {
        *model = snapshot;
        log.best_epoch = Some(epoch);
    }
    opt.lr = base_lr;
    model.set_mode(restore_mode);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelSpec, OptimizerConfig};
    use crate::srcm::HeadDesign;

    fn separable(n: usize) -> LabeledData {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            let y = i % 2;
            let shift = if y == 0 { 1.5 } else { -1.5 };
            rows.push(vec![shift + 0.5 * t.sin(), 0.5 * t.cos()]);
            labels.push(y);
        }
        LabeledData::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn toy_model(seed: u64) -> Model {
        let spec = ModelSpec {
            input_width: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
            dropout: 0.0,
            head: HeadDesign::Vanilla,
            srcm: None,
            num_classes: 2,
        };
        Model::build(&spec, seed).unwrap()
    }

    fn fit(seed: u64, epochs: usize) -> (Model, TrainLog) {
        let data = separable(64);
        let mut model = toy_model(seed);
        let mut opt = OptimizerState::new(&model, &OptimizerConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            step_decay: true,
        };
        let log = train_epochs(&mut model, &data, None, &mut opt, &cfg, &DefenseConfig::None, seed)
            .unwrap();
        (model, log)
    }

    #[test]
    fn zero_epochs_leaves_model_alone() {
        let (model, log) = fit(0, 0);
        assert_eq!(model, toy_model(0));
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn separable_set_is_learned() {
        let (model, log) = fit(0, 50);
        assert_eq!(log.epochs.len(), 50);
        assert_eq!(accuracy(&model, &separable(64)).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (m1, l1) = fit(7, 10);
        let (m2, l2) = fit(7, 10);
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        let (m3, _) = fit(8, 10);
        assert_ne!(m1, m3);
    }

    #[test]
    fn empty_set_is_input_error() {
        let mut model = toy_model(0);
        let mut opt = OptimizerState::new(&model, &OptimizerConfig::default()).unwrap();
        let empty = LabeledData::new(Matrix::zeros(0, 2), vec![]).unwrap();
        let err = train_epochs(
            &mut model,
            &empty,
            None,
            &mut opt,
            &TrainConfig::default(),
            &DefenseConfig::None,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, LabError::Input(_)));
    }

    #[test]
    fn step_decay_milestones() {
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 1,
            step_decay: true,
        };
        assert_eq!(cfg.lr_at(0.1, 49), 0.1);
        assert!((cfg.lr_at(0.1, 50) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(0.1, 75) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let data = separable(64);
        let monitor = separable(16);
        let mut model = toy_model(1);
        let mut opt = OptimizerState::new(&model, &OptimizerConfig::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 16,
            step_decay: false,
        };
        let defense = DefenseConfig::EarlyStopping {
            patience: 3,
            min_delta: 0.0,
        };
        let log = train_epochs(&mut model, &data, Some(&monitor), &mut opt, &cfg, &defense, 1)
            .unwrap();
        assert!(log.stopped_early);
        assert!(log.epochs.len() < 200);
        let best = log.best_epoch.unwrap();
        let best_acc = log.epochs[best].monitor_acc.unwrap();
        assert_eq!(accuracy(&model, &monitor).unwrap(), best_acc);

        let err = train_epochs(&mut model, &data, None, &mut opt, &cfg, &defense, 1).unwrap_err();
        assert!(matches!(err, LabError::Input(_)));
    }
}
