use std::io;

use liverseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("payload holds {actual} bytes, header implies {expected}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("HU value {0} outside [-2048, 4095]")]
    HuOutOfRange(i16),

    #[error("label {0} outside {{0, 1, 2}}")]
    InvalidLabel(u8),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place lesion {index} inside the liver after {attempts} attempts")]
    LesionPlacement { index: usize, attempts: usize },

    #[error("need {needed} {kind} slices, only {available} available")]
    InsufficientSlices { kind: &'static str, needed: usize, available: usize },

    #[error("crop {crop} does not fit a {height}x{width} slice scaled by {min_scale}")]
    CropTooLarge { crop: usize, height: usize, width: usize, min_scale: f64 },

    #[error("input extent {0}x{1} is not divisible by 8")]
    NotDivisible(usize, usize),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
