use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure in {op}: non-finite value")]
    Numerical { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: field `{field}`: {reason}")]
    Format {
        what: String,
        field: String,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &str, field: &str, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn numerical(op: impl Into<String>) -> Self {
        Error::Numerical { op: op.into() }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Shape(_) => 3,
            Error::Numerical { .. } => 4,
        }
    }
}
