use thiserror::Error;

/// Errors raised anywhere in the adaptation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Invalid configuration. `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A loss or parameter became non-finite.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("checkpoint parse error at line {line}: {message}")]
    Checkpoint { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
