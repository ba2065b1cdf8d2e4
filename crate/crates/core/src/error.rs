use thiserror::Error;

use crate::model_io::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (largest eigenvalue {max_eigenvalue:.3e})")]
    NotPositiveDefinite { max_eigenvalue: f64 },

    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BadBufferLength { rows: usize, cols: usize, len: usize },

    #[error("matrix entry at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("layer statistics are empty (no tokens accumulated)")]
    EmptyStats,

    #[error("matrix is rank deficient")]
    RankDeficient,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
