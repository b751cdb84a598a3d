use thiserror::Error;

/// Errors raised anywhere in the inference engine.
#[derive(Debug, Error)]
pub enum BnnError {
    #[error("network shape error at layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("leapfrog diverged at step {step}")]
    Divergence { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("run {index} failed: {source}")]
    Run { index: usize, source: Box<BnnError> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BnnError>;

pub(crate) fn ensure_finite(value: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(BnnError::NonFinite { context: context() })
    }
}
