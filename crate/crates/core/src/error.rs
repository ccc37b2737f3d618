use std::io;

use thiserror::Error;

/// Errors produced across the model, simulator, correlator and fitter.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidParam { key: String, reason: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("detection mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("write failed after {written} bytes: {source}")]
    PartialWrite {
        written: u64,
        #[source]
        source: io::Error,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
