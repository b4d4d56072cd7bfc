use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("SVD did not converge within {sweeps} sweeps (off-diagonal ratio {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid rank policy: {0}")]
    InvalidPolicy(String),

    #[error("diagonal is empty")]
    EmptyDiagonal,

    #[error("all-zero diagonal: ratio-based rank policy is undefined")]
    ZeroDiagonal,

    #[error("diagonal magnitudes increase at index {index} ({prev} < {next})")]
    NonMonotoneDiagonal { index: usize, prev: f64, next: f64 },

    #[error("invalid adapter spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("token {token} at position {position} is out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("backward called without a matching forward pass: {0}")]
    StaleCache(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::Divergence { .. }
        )
    }
}
