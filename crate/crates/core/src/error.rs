use std::path::PathBuf;

use thiserror::Error;

use crate::frames::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample {clip_id} failed validation: {}", join_violations(.violations))]
    Validation { clip_id: String, violations: Vec<Violation> },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("dataset manifest: {0}")]
    Manifest(String),

    #[error("clip {clip_id}: missing {view} frame {index} at {}", .path.display())]
    MissingFrame { clip_id: String, view: String, index: usize, path: PathBuf },

    #[error("non-finite value {value} in loss term `{term}`")]
    Numeric { term: String, value: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("tensor `{name}`: expected shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("tensor `{name}`: unsupported dtype `{dtype}` (expected f32)")]
    DtypeMismatch { name: String, dtype: String },

    #[error("tensor blob truncated: need {expected} bytes, found {found}")]
    TruncatedBlob { expected: u64, found: u64 },

    #[error("checkpoint lacks parameters required by this configuration: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("checkpoint carries parameters this configuration does not use: {}", .0.join(", "))]
    UnexpectedParameters(Vec<String>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
