use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter vectors (or a vector and a buffer) disagree on group layout.
    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity showed up; `location` names where it was first seen.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("corrupt checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }

    /// Process exit code used by the `swa` binary.
    ///
    /// 2 = configuration or structural validation, 3 = numeric failure, 4 = I/O or on-disk format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::InvalidArgument(_)
            | Error::UnknownGroup(_)
            | Error::Layout(_)
            | Error::Dimension(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::EmptyDataset(_)
            | Error::Parse { .. }
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Json(_) => 4,
        }
    }
}
