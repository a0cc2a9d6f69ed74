use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The Schur complement at `block` has a non-positive pivot.
    #[error("matrix is not positive definite at block {block}")]
    NotPositiveDefinite { block: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dense size {size} exceeds cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("posterior was built without gradient recording")]
    TapeMissing,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid network layout: {0}")]
    InvalidLayout(String),

    #[error("negative count {value} at t={t}, k={k}")]
    NegativeCount { t: usize, k: usize, value: f64 },

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("non-finite ELBO at epoch {epoch} (last good epoch: {last_good:?})")]
    NonFiniteElbo { epoch: usize, last_good: Option<usize> },

    #[error("incompatible oracle: {0}")]
    IncompatibleOracle(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => 3,
            Error::NotPositiveDefinite { .. } | Error::NonFiniteElbo { .. } | Error::CapExceeded { .. } => 4,
            Error::IncompatibleOracle(_) => 5,
            _ => 2,
        }
    }
}
