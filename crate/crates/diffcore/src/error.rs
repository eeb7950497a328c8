use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward() already ran on this tape")]
    BackwardTwice,
    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("matrix is singular after regularization (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
