use thiserror::Error;

#[derive(Debug, Error)]
pub enum SifError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SifError>;
