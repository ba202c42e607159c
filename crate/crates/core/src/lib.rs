//! Cascaded dilated-ResNet liver and lesion segmentation for CT volumes.

pub mod arch;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod multiscale;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
