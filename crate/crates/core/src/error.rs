use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate fusion: summed quaternion norm {0:e}")]
    DegenerateFusion(f64),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite activation produced by layer {layer}")]
    Numeric { layer: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error(transparent)]
    Wire(#[from] crate::proto::WireError),
    #[error("connection error: {0}")]
    Connection(String),
    #[error("remote execution failed with status {0:?}")]
    Remote(crate::proto::Status),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
