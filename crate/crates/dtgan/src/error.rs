//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DtganError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown domain {0}")]
    UnknownDomain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DtganError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DtganError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DtganError>;
