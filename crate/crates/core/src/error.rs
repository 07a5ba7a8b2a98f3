use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A scene file could not be parsed. `row` is 1-based and counts the header for CSV.
    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite loss on scene {scene}: {value}")]
    NonFiniteLoss { scene: String, value: f64 },

    /// A checkpoint does not match the parameters the model expects.
    #[error("checkpoint incompatible at parameter `{param}`: {message}")]
    Checkpoint { param: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
