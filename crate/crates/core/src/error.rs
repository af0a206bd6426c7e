use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// A container file field failed validation.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// The file ended before `field` could be read in full.
    #[error("truncated file: `{field}` needs {needed} bytes, {available} available")]
    Truncated {
        field: String,
        needed: usize,
        available: usize,
    },

    #[error("clip too short: {required} frames required, {available} available")]
    Length { required: usize, available: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("incompatible checkpoint; differing fields: {}", .fields.join(", "))]
    Compatibility { fields: Vec<String> },

    #[error("stale cache entry {path}: {message}")]
    StaleCache { path: PathBuf, message: String },

    /// An episode failed inside an evaluation run.
    #[error("episode failed (config {config}, shot {shot}, seed {seed}): {source}")]
    Episode {
        config: String,
        shot: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Seed that reproduces the failing unit of work, when one is known.
    pub fn reproduction_seed(&self) -> Option<u64> {
        match self {
            Error::Episode { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}
