use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("ray does not cross the polygon boundary")]
    NoIntersection,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scene generation failed: {0}")]
    Placement(String),
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
