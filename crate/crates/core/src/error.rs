use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// Dimension mismatch inside a model; `layer` is the index of the offending layer.
    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    /// Caches or buffers no longer match the model they were produced for.
    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Target and shadow were not trained under the same recipe.
    #[error("adaptive-attack contract violated: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LabError>,
    },
}

impl LabError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        LabError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's configuration rather than by a run.
    pub fn is_config(&self) -> bool {
        match self {
            LabError::Config { .. } => true,
            LabError::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
