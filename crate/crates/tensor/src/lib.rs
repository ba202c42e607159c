//! Dense `f64` tensors and the differentiable operations of a dilated
//! residual segmentation network: convolution, batch normalization, ReLU,
//! residual addition, bilinear resizing, channel softmax and per-pixel
//! cross-entropy, together with momentum SGD and a finite-difference
//! gradient checker.

mod conv;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod optim;
pub mod parallel;
mod tensor;

pub use conv::{conv2d, ConvParams, Padding};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, Probe};
pub use graph::{BnStats, Graph, NodeId};
pub use ops::{
    add, batch_norm, bilinear_resize, cross_entropy_loss, mul, relu, resize_plane, softmax_channels, Mode,
    RunningStats, BN_EPSILON, BN_MOMENTUM,
};
pub use optim::{sgd_update, ParamStore, Parameter, Sgd};
pub use tensor::Tensor;
