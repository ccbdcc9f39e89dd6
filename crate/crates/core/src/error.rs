use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside an operation's domain (bad shape, bad index,
    /// empty input where one row is required, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid model or run configuration, detected at construction.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke a state contract (e.g. training an unfrozen backbone,
    /// mutating a completed task's prompt).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Finite-difference probing hit a non-finite loss.
    #[error("non-finite loss at coordinate {coordinate} ({side} perturbation)")]
    NonFiniteLoss { coordinate: usize, side: &'static str },

    /// Malformed binary input.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Config file contents that do not match the schema.
    #[error("{path}: {message}")]
    Schema { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
