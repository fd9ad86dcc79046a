use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or configuration, detected before any compute.
    #[error("config error: {0}")]
    Config(String),
    /// An input outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite or degenerate values produced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A malformed file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
