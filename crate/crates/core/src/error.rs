use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Size(_) => "size",
            Error::Sampling(_) => "sampling",
            Error::Shape(_) => "shape",
            Error::Cache(_) => "cache",
            Error::Numeric(_) => "numeric",
            Error::Length(_) => "length",
            Error::Normalization(_) => "normalization",
            Error::Metric(_) => "metric",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
