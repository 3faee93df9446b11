use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the auditing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint corrupted: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("training error: {0}")]
    Training(String),

    /// Replay or header verification found stored data that does not match
    /// what the engine recomputes.
    #[error("integrity check failed for `{field}`: {detail}")]
    Integrity { field: String, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn integrity(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Integrity {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end:
    /// 2 for validation problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Integrity { .. }
            | Error::Format { .. }
            | Error::Checkpoint(_) => 2,
            Error::MetricUndefined(_) | Error::Training(_) | Error::Io { .. } => 3,
        }
    }
}
