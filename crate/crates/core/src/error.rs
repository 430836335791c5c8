use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("timestep {t} out of range for a schedule with {num_timesteps} steps")]
    TimestepOutOfRange { t: usize, num_timesteps: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: malformed tensor file: {reason}")]
    TensorFile { path: PathBuf, reason: String },

    #[error("pretrained weights not found at {path} (set DEFECTDIFF_WEIGHTS_DIR or run `defectdiff init-weights`)")]
    WeightsUnavailable { path: PathBuf },

    #[error("weights at {path} do not match the pinned hash: expected {expected}, found {actual}")]
    WeightsHashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(PathBuf),

    #[error("missing prerequisite {path}: {hint}")]
    MissingPrerequisite { path: PathBuf, hint: String },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
