use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("missing gradient for learnable parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("pearson correlation is undefined for a constant series")]
    ConstantSeries,

    #[error("k = {k} is out of range for a series of length {n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("illegal block chain at block {index} ({block}): {reason}")]
    IllegalChain {
        index: usize,
        block: String,
        reason: String,
    },

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("incompatible stage transfer: {0}")]
    IncompatibleStage(String),

    #[error("model has no self-attention block")]
    NoAttention,

    #[error("model readout is not fully connected")]
    NotFcl,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
