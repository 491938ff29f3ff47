use thiserror::Error;

/// Errors produced across the codec, optimizer and simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Domain(String),

    #[error("layer {0} is not available in this model")]
    MissingLayer(u8),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("quantization index overflow for value {value} with step {step}")]
    Overflow { value: f64, step: f64 },

    #[error("training diverged at step {step}: {reason}")]
    TrainingFailure { step: usize, reason: String },

    #[error("base layer is empty: no anchor passes the level-0 mask threshold")]
    EmptyBaseLayer,

    #[error("malformed container: {0}")]
    Format(String),

    #[error("integrity check failed for layer {layer}: {reason}")]
    Integrity { layer: u8, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
