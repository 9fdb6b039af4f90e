//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

/// Coarse failure class, used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
    Data,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("record too short: {len} samples, need at least one window of {window}")]
    RecordTooShort { len: usize, window: usize },

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid band: {0}")]
    InvalidBand(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("no centroid for class {0}")]
    MissingCentroid(usize),

    #[error("TTA requires raw segments: none stored for sample {0}")]
    MissingSegment(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: String, detail: String },
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) => ErrorClass::Config,
            CoreError::Io { .. } | CoreError::Format { .. } => ErrorClass::Io,
            CoreError::NonFinite(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
