use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate record for ({clip_id}, {modality})")]
    DuplicateRecord { clip_id: String, modality: String },

    #[error("clip {clip_id} is too short: {length} frames < window of {window}")]
    ClipTooShort {
        clip_id: String,
        length: usize,
        window: usize,
    },

    #[error("window length mismatch for clip {clip_id}: expected {expected}, found {found}")]
    WindowMismatch {
        clip_id: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context} (clip {clip_id})")]
    NonFinite { context: String, clip_id: String },

    #[error("pairing plan error: {0}")]
    Plan(String),

    #[error("unknown clip id {0}")]
    UnknownClip(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
