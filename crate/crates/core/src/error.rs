use std::path::PathBuf;

use crate::label::ClassLabel;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: row {row}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("duplicate image path in manifest: {0}")]
    DuplicatePath(PathBuf),

    #[error("class `{0}` has no records; cannot balance classes")]
    EmptyClass(ClassLabel),

    #[error("class `{label}` has {count} record(s); cannot place it in both train and validation")]
    ClassTooSmall { label: ClassLabel, count: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pretrained backbone weights unavailable: {0}")]
    PretrainedUnavailable(String),

    #[error("non-finite {what} at {context}")]
    NonFinite { what: &'static str, context: String },

    #[error("cannot decode image: {0}")]
    Decode(String),

    #[error("bundle format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("weights checksum mismatch: expected {expected}, computed {computed}")]
    Checksum { expected: String, computed: String },

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure was caused by bad input from the caller (files,
    /// flags, data) rather than a fault inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Tensor(_) | Error::NonFinite { .. })
    }
}
