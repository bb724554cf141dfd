use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported Sobol dimension {dim} (table holds {max})")]
    UnsupportedDimension { dim: usize, max: usize },

    #[error("invalid sample budget: {0}")]
    InvalidBudget(String),

    #[error("variance undefined: {0}")]
    VarianceUndefined(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("segment {from} -> {to} needs residual source `{source_name}` outside the segment")]
    DanglingSkip {
        from: String,
        to: String,
        source_name: String,
    },

    #[error("unknown checkpoint `{0}`")]
    UnknownCheckpoint(String),

    #[error("invalid input space: {0}")]
    InvalidSpace(String),

    #[error("refusing combinatorially large problem: {0}")]
    TooLarge(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed container: {0}")]
    Container(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
