use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::layer::AffineGrad;
use crate::nn::model::{Grads, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.09,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(LabError::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(LabError::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum; weight decay is folded into the velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Grads,
}

impl OptimizerState {
    pub fn new(model: &Model, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: model.zero_grads(),
        })
    }

    pub fn velocity(&self) -> &Grads {
        &self.velocity
    }
}

/// `v ← momentum·v + (grad + weight_decay·w)`, then `w ← w − lr·v`, for every
/// parameter tensor. Nothing is written unless every gradient is finite and
/// every shape matches.
pub fn sgd_step(model: &mut Model, grads: &Grads, opt: &mut OptimizerState) -> Result<()> {
    let layers = model.layers();
    if grads.0.len() != layers.len() || opt.velocity.0.len() != layers.len() {
        return Err(LabError::State(format!(
            "{} gradients / {} velocity buffers for {} layers",
            grads.0.len(),
            opt.velocity.0.len(),
            layers.len()
        )));
    }
    for (i, layer) in layers.iter().enumerate() {
        let ok = match (layer.affine(), &grads.0[i], &opt.velocity.0[i]) {
            (Some(a), Some(g), Some(v)) => g.matches(a) && v.matches(a),
            (None, None, None) => true,
            _ => false,
        };
        if !ok {
            return Err(LabError::State(format!(
                "gradient or velocity shape mismatch at layer {i}"
            )));
        }
    }
    if !grads.is_finite() {
        return Err(LabError::Numeric("non-finite gradient; step aborted".into()));
    }

    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((layer, grad), vel) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.0)
        .zip(opt.velocity.0.iter_mut())
    {
        let (Some(param), Some(grad), Some(vel)) = (layer.affine_mut(), grad, vel) else {
            continue;
        };
        let AffineGrad { weight: gw, bias: gb } = grad;
        update(param.weight.as_mut_slice(), gw.as_slice(), vel.weight.as_mut_slice(), lr, mu, wd);
        update(&mut param.bias, gb, &mut vel.bias, lr, mu, wd);
    }
    Ok(())
}

#[inline]
fn update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + (g + wd * *w);
        *w -= lr * *v;
    }
}
