use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}`")]
    InvalidValue { op: &'static str },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { token: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds the limit of {max}")]
    LengthExceeded { len: usize, max: usize },

    #[error("no corpus count for token `{0}`")]
    MissingCount(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("sequence of length {len} is shorter than n = {n}")]
    TooShort { len: usize, n: usize },

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("`{0}` is not implemented")]
    Unimplemented(&'static str),

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::ContractViolation(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
