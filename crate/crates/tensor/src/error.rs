use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid convolution parameters: {0}")]
    InvalidParams(String),

    #[error("convolution produces a non-positive output extent for input {height}x{width}")]
    EmptyOutput { height: usize, width: usize },

    #[error("batch normalization over zero elements")]
    EmptyBatch,

    #[error("label {0} is not a valid class index")]
    InvalidLabel(f64),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown node {0}")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;
