use thiserror::Error;

/// Errors raised by the numerical kernels, optimizers and problem constructors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below threshold {threshold:e}")]
    NotPsd { min_eigenvalue: f64, threshold: f64 },

    #[error("matrix is numerically singular in {context} (smallest eigenvalue/pivot {value:e}); {hint}")]
    Singular {
        context: &'static str,
        value: f64,
        hint: &'static str,
    },

    #[error("iteration diverged at step {iteration} of {kernel}")]
    Divergence {
        kernel: &'static str,
        iteration: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("full-matrix preconditioner refused: {size} parameters exceeds cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("cosine similarity undefined for a zero matrix")]
    ZeroMatrix,

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
