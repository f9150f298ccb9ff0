use thiserror::Error;

/// Errors raised across the toolkit. Each variant maps to one failure class
/// that callers (notably the CLI) branch on.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis or node shape does not line up with what an operation needs.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid configuration: bad stride, non-divisible groups, unknown operator.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked in the wrong state (missing cache, uninitialized parameters).
    #[error("state error: {0}")]
    State(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Well-formed file with out-of-range values.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or a degenerate statistic.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
