//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: row {row}: {reason}")]
    ManifestRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("negative age {age} (row {row})")]
    NegativeAge { age: i64, row: usize },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("channel count mismatch: content has {content}, style has {style}")]
    ChannelMismatch { content: usize, style: usize },

    #[error("missing discriminator layer {layer} in activation list")]
    MissingLayer { layer: usize },

    #[error("loss term `{term}` is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("training diverged at step {step}: loss term `{term}` is not finite ({value})")]
    TrainDiverged {
        term: &'static str,
        value: f64,
        step: u64,
    },

    #[error("age group {group} has no records")]
    EmptyGroup { group: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("estimator failed on {path}: {reason}")]
    Estimator { path: PathBuf, reason: String },

    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
