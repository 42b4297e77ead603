use thiserror::Error;

/// Errors raised by the filtering, transport and adaptation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("Cholesky factorization failed after jitter up to {max_jitter:e}")]
    Cholesky { max_jitter: f64 },

    /// A kernel row `exp(-C_i. / eps)` vanished; usually eps is too small for the cost scale.
    #[error("transport kernel underflow in row {row} (eps = {epsilon:e}); increase eps or enable log-domain stabilization")]
    KernelUnderflow { row: usize, epsilon: f64 },

    #[error("exact transport solver limited to {limit} cells, got {cells}")]
    SizeLimit { cells: usize, limit: usize },

    #[error("non-finite gradient in component {index}")]
    NonFiniteGradient { index: usize },

    #[error("insufficient data: need at least {needed} samples, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
