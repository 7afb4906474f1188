use thiserror::Error;
use tokenmotion_tensor::TensorError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate ray at pixel ({u}, {v}) of frame {frame}")]
    DegenerateRay { u: f64, v: f64, frame: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
