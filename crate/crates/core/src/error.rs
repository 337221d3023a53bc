use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value (kernel, stride, scale, channel schedule...) is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two sub-networks were connected with incompatible tensors.
    #[error("wiring error: {0}")]
    Wiring(String),

    /// An operation produced or received NaN/Inf.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Misuse of the tape (non-scalar loss, stale variable, double backward).
    #[error("autograd usage error: {0}")]
    Usage(String),

    /// Input data violates a value contract (non-binary mask, unknown label...).
    #[error("validation error: {0}")]
    Validation(String),

    /// On-disk file does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
