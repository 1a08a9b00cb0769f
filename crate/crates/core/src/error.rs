use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token {position}: {reason}")]
    InvalidToken { position: usize, reason: String },

    #[error("score {raw} outside scale [{min}, {max}]")]
    ScoreOutOfRange { raw: i64, min: i64, max: i64 },

    #[error("duplicate question id {0}")]
    DuplicateId(u64),

    #[error("no record with id {0}")]
    MissingRecord(u64),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("numerical fault in sample {sample}: {reason}")]
    NumericalFault { sample: usize, reason: String },

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("role isolation violated: {0} tokens reached the optimizer")]
    RoleIsolation(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("snapshot line {line}: {reason}")]
    Snapshot { line: usize, reason: String },

    #[error("{0}")]
    Range(String),

    #[error("tracing was not enabled for run {0}; rerun with --trace-samples")]
    TracingDisabled(PathBuf),

    #[error("no valid metrics records in {0}")]
    NoMetrics(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
