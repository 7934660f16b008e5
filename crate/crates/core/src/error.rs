use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: output dimension would be non-positive for input {input:?}")]
    EmptyOutput { op: &'static str, input: Shape },

    #[error("channel range [{offset}, {end}) exceeds width {width}")]
    RangeOverflow {
        offset: usize,
        end: usize,
        width: usize,
    },

    #[error("batch norm over an empty normalization set")]
    EmptyNormalization,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Shape),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Epochs completed before the divergence.
        history: Box<crate::train::History>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
