use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at pixel ({x}, {y}), label {label}")]
    NonFinite {
        x: usize,
        y: usize,
        label: usize,
        value: f64,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("zero probability assigned to the ground-truth label at pixel ({x}, {y})")]
    ZeroProbability { x: usize, y: usize },

    #[error("unsupported in {mode} filter mode: {what}")]
    UnsupportedMode { mode: &'static str, what: String },

    #[error("{path}: malformed netpbm data at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
