use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (labels out of range, mismatched images, ...).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. backward with activations from another forward pass.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    /// Malformed binary container.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("failed to load scene: {0}")]
    Scene(String),

    #[error("checkpoint config mismatch:\n{0}")]
    ConfigMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error ({path}): {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
