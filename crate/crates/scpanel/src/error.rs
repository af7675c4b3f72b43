use thiserror::Error;

/// Errors produced by panel construction, solvers, estimators, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: dimensions, domains, or constraint violations.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numerical failure: a computation could not reach its contract.
    #[error("computation failed: {0}")]
    Computation(String),

    /// Malformed on-disk data (CSV or JSON), with location where known.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn computation(msg: impl Into<String>) -> Self {
        Error::Computation(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
