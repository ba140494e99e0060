//! Dense feedforward engine with hand-derived backward passes.

mod layer;
pub(crate) mod loss;
mod model;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LabError;

pub use layer::{Affine, AffineGrad, Layer};
pub use loss::{softmax, softmax_cross_entropy, LossOutput};
pub use model::{ForwardPass, Grads, MagnitudeSource, Model, ModelSpec};
pub use optim::{sgd_step, OptimizerConfig, OptimizerState};
pub use train::{accuracy, train_epochs, EpochRecord, LabeledData, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub(crate) fn layer(&self) -> Layer {
        match self {
            Activation::Tanh => Layer::Tanh,
            Activation::Relu => Layer::Relu,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(LabError::config(
                "activation",
                format!("unknown activation `{other}` (tanh, relu)"),
            )),
        }
    }
}
