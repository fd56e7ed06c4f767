use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed configuration; `field` is the JSON path of the offending value.
    #[error("{path}: invalid field `{field}`: {msg}")]
    Config { path: PathBuf, field: String, msg: String },

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] cgnet::CgError),
}

pub type Result<T> = std::result::Result<T, CliError>;
