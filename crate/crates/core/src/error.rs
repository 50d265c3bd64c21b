use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the human value detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A file does not have the expected columns or shape.
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    /// A cell or field holds a value outside its domain.
    #[error("value error{}: {message}", row.as_ref().map(|r| format!(" at row {r}")).unwrap_or_default())]
    Value { row: Option<String>, message: String },

    /// Two artifacts that must agree do not.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// The requested feature is not available for this backend or mode.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An experiment or asset configuration is invalid.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A generated answer names neither a positive nor a negative choice.
    #[error("undecided answer: {0:?}")]
    Undecided(String),

    /// A chat client request failed.
    #[error("client error: {0}")]
    Client(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn value(row: Option<&str>, message: impl Into<String>) -> Self {
        Error::Value {
            row: row.map(str::to_owned),
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}
