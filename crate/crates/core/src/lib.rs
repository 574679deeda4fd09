//! 3-D Swin transformer segmentation for multi-modal MRI volumes.
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod volume;
pub mod windowing;

pub use error::{Error, Result};
