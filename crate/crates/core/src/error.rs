use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason} (shape {shape:?})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,

    #[error("hsic needs at least two examples per batch, got {0}")]
    BatchTooSmall(usize),

    #[error("hsic operands disagree on batch size: {0} vs {1}")]
    BatchMismatch(usize, usize),

    #[error("channel scoring needs at least one channel")]
    NoChannels,

    #[error("label {label} at position {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("invalid network config at layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },

    #[error("channel mask has {mask} channels but the last conv layer has {layer}")]
    MaskMismatch { mask: usize, layer: usize },

    #[error("network has no convolutional layer to mask")]
    NoConvLayer,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, Error>;
