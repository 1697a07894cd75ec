//! A compact encoder–decoder vessel segmentation network built from hand-differentiated kernels:
//! modulated deformable convolution, mixed depthwise convolution blocks, a multi-scale
//! deep-supervision loss, AdamW training with early stopping, and pixel-level segmentation metrics.

pub mod data;
pub mod dcn;
pub mod network;
pub mod mixconv;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod metrics;
pub mod par;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
