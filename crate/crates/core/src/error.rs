use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Divergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("row {row}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: duplicate item id `{item_id}`")]
    DuplicateItem { row: usize, item_id: String },

    #[error("row {row}: non-finite value in column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite activation in {stage} (layer {layer})")]
    NonFiniteActivation { stage: &'static str, layer: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Divergence { .. } | Error::NonFiniteActivation { .. } => ErrorClass::Divergence,
            _ => ErrorClass::Data,
        }
    }
}
