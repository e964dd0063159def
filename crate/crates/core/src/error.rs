use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced anywhere in the numeric pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation record was already consumed by a backward pass")]
    TapeConsumed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("channel `{0}` is constant on the training split")]
    ConstantChannel(String),
    #[error("split `{split}` has {len} steps, fewer than the window length {window}")]
    SplitTooShort {
        split: &'static str,
        len: usize,
        window: usize,
    },
    #[error("timestamps are not strictly increasing at row {0}")]
    NonMonotonicTimestamps(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("degenerate synthesis parameters: {0}")]
    DegenerateSynthesis(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
