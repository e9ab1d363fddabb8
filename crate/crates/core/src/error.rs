use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("sequence of length {0} cannot be split (need at least 3)")]
    Split(usize),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("sampler error for facet `{facet}`: {msg}")]
    Sampler { facet: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Input(String),

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

    /// Short category name, used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Index { .. } => "shape",
            Error::Parameter(_) | Error::Config(_) => "config",
            Error::Parse { .. } | Error::Format(_) | Error::Json(_) => "format",
            Error::Consistency(_) | Error::Split(_) | Error::Input(_) => "data",
            Error::Batch(_) | Error::Sampler { .. } => "sampling",
            Error::Io { .. } => "io",
        }
    }
}
