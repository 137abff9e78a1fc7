use thiserror::Error;

/// Errors raised by the estimators, tests and optimizers in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular value decomposition did not converge")]
    SvdNoConvergence,

    #[error("matrix power M^{0} is zero; every power of the source matrix must be non-zero")]
    ZeroPower(usize),

    #[error("covariance is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("state {0} is never visited as a transition source")]
    UnvisitedState(usize),

    #[error("chain is reducible: eigenvalue-1 eigenspace has dimension {0}")]
    Reducible(usize),

    #[error("matrix is not row-stochastic: {0}")]
    NotStochastic(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, Error>;
