use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("record/embedding count mismatch: {records} records vs {embeddings} embeddings")]
    CountMismatch { records: usize, embeddings: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A corpus failed validation; carries the first violation.
    #[error("{0}")]
    Validation(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {family} '{name}' (available: {available})")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        available: String,
    },

    #[error("pair ({i}, {j}) has no designated negative")]
    MissingNegative { i: u32, j: u32 },

    #[error("record id {id} out of range for corpus of {len}")]
    OutOfRange { id: usize, len: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("zero total variance")]
    ZeroVariance,

    #[error("endpoint failure: {0}")]
    Endpoint(String),

    #[error("no replay entry for request digest {0}")]
    ReplayMiss(String),

    #[error("{0} patterns given; a debiasing prompt takes at most 2")]
    TooManyPatterns(usize),

    #[error("calibration infeasible: {0}")]
    Infeasible(String),

    #[error("run directory {} is locked by another run (remove {} if stale)", dir.display(), dir.join(crate::pipeline::LOCK_FILE).display())]
    Locked { dir: PathBuf },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Validation(_)
            | Error::CountMismatch { .. }
            | Error::DimensionMismatch { .. }
            | Error::EmptyCorpus => 2,
            Error::Infeasible(_) => 3,
            Error::Endpoint(_) | Error::ReplayMiss(_) => 4,
            _ => 1,
        }
    }
}
