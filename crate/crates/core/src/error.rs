use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("{op}: produced non-finite values ({context})")]
    NonFinite { op: String, context: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(ShapeDisplay),

    #[error("loss is not attached to a live tape")]
    DetachedLoss,

    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,

    #[error("operands are recorded on different tapes")]
    TapeMismatch,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Newtype so shapes render as `[a, b, c]` inside error messages.
#[derive(Debug, Clone)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, details: details.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
