use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("layout mismatch: expected {expected} values, got {actual}")]
    Layout { expected: usize, actual: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("gradient signal error: {0}")]
    Signal(String),

    #[error("signal not ready: {0} observation(s) recorded, need at least 2")]
    NotReady(u64),

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("timed out after {0:?} waiting for {1}")]
    Timeout(std::time::Duration, &'static str),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
