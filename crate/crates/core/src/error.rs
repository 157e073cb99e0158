use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty input to {op}")]
    Empty { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("objective is not deterministic: base evaluations {first} and {second} differ")]
    NonDeterministic { first: f64, second: f64 },

    #[error("frozen-value replay diverged from the recorded graph at {op}")]
    ReplayMismatch { op: &'static str },

    #[error("model is not initialized: {0}")]
    Uninitialized(String),

    #[error("training diverged at epoch {epoch} (last finite loss {last_loss})")]
    Diverged { epoch: usize, last_loss: f64 },

    #[error("unknown class label {0}")]
    UnknownClass(u8),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("checkpoint format version {found} does not match expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
