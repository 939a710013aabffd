use thiserror::Error;

/// Errors raised by the operators, the inner/outer loops and the task builders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported projection: {0}")]
    UnsupportedProjection(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A documented precondition of an operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("invalid hyper-parameters: {0}")]
    InvalidOmega(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Non-finite or exploding iterate. `t` is the outer step (0 outside training),
    /// `k` the inner step.
    #[error("divergence at outer step {t}, inner step {k}")]
    Divergence { t: usize, k: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
