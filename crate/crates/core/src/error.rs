use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A setting is invalid. `key` names the offending configuration key or field.
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller violated a shape or usage contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("episode sampling failed: {0}")]
    Episode(String),

    /// A loss or gradient became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::Episode(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::Format { .. } | Error::Missing(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
