use thiserror::Error;

/// Errors produced by state manipulation, integration and scenario setup.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate variable label `{0}`")]
    DuplicateLabel(String),

    #[error("unknown variable label `{0}`")]
    UnknownLabel(String),

    #[error("quadrature `{0}` has no conjugate partner in the label set")]
    MissingPartner(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unphysical state: {0}")]
    Unphysical(String),

    #[error("integration produced non-finite values at t = {time:e}")]
    Divergence { time: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
