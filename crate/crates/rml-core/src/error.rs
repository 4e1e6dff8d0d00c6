use thiserror::Error;

pub type Result<T> = std::result::Result<T, RmlError>;

#[derive(Debug, Error)]
pub enum RmlError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("regeneration from step {from} to step {to} is not supported by this bridge")]
    UnsupportedRegeneration { from: usize, to: usize },

    #[error("training diverged at iteration {iteration} (step t={step}): loss is not finite")]
    Diverged { iteration: usize, step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RmlError {
    pub fn config(msg: impl Into<String>) -> Self {
        RmlError::Config(msg.into())
    }
}
