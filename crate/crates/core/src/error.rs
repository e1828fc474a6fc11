use thiserror::Error;

/// Errors produced anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or field extents disagree with what an operation needs.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A text record could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A binary record could not be decoded.
    #[error("decode error at byte offset {offset}: {msg}")]
    Decode { offset: usize, msg: String },
    /// Wrong magic bytes, unsupported version or dtype, truncated payload.
    #[error("format error: {0}")]
    Format(String),
    /// An event lies outside the sensor or the time window.
    #[error("event {index} out of bounds: {msg}")]
    OutOfBounds { index: usize, msg: String },
    /// A scene point is at or behind the camera plane.
    #[error("point behind camera (Z = {0})")]
    BehindCamera(f64),
    /// A parameter violates its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A named weight tensor required by the architecture is absent.
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),
    /// Metrics or losses were requested over an empty validity mask.
    #[error("validity mask selects no pixels")]
    EmptyMask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
