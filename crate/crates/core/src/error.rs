use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("resolution infeasible: {0}")]
    ResolutionInfeasible(String),

    #[error("linear solve failed: {message} (residual {residual:e})")]
    Solver { message: String, residual: f64 },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("identity check failed: {0}")]
    Identity(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
