use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SamError {
    /// Invalid experiment or benchmark configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two tensors or maps that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("missing saliency map for sample `{sample}` (expected {path})")]
    MissingSaliency { sample: String, path: PathBuf },

    /// A stream sample was offered to the learner more than once.
    #[error("online constraint violated: sample `{0}` revisited within the stream pass")]
    OnlineViolation(String),

    /// Cross-entropy gradients reached the saliency encoder.
    #[error("gradient leak: classification loss reached saliency parameter `{0}`")]
    GradientLeak(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SamError {
    pub fn config(msg: impl Into<String>) -> Self {
        SamError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SamError::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        SamError::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SamError::Io {
            path: path.into(),
            source,
        }
    }
}
