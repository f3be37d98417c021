use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite value at {stage} (layer {layer})")]
    NonFinite { stage: String, layer: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("insufficient subjects: {0}")]
    Insufficient(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error("missing output of stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Numerical failures (divergence, non-finite activations).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
