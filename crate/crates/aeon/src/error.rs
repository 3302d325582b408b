//! Crate-wide error type and the exit-code mapping used by the CLI.

use std::path::PathBuf;

/// Everything that can go wrong across the crate.
///
/// Variants are grouped by the process exit code the CLI maps them to:
/// configuration problems exit with 2, dataset problems with 3, numeric
/// failures (non-finite losses or gradients, domain violations) with 4.
/// Anything else exits with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, malformed, or inconsistent dataset.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric computation left the finite domain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An input fell outside a mathematical function's domain.
    #[error("domain error: {func}({arg}) is undefined")]
    Domain { func: &'static str, arg: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 is success, 2 config, 3 data,
    /// 4 numeric, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) | Error::Domain { .. } => 4,
            Error::Io { .. } | Error::Json(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
