use thiserror::Error;

use crate::index::{BuildError, FormatError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed mask: {0}")]
    MalformedMask(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("image {0:?} has no regions")]
    NoRegions(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("invalid logits: {0}")]
    InvalidLogit(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error(transparent)]
    Build(#[from] BuildError),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no evaluable queries (every query has zero relevant images)")]
    NoEvaluableQueries,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
