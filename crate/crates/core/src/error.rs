use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("line {line}: dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("token id {id} is outside the vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
