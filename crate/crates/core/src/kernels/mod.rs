//! Graph-free forward and backward kernels on NCHW tensors.
//!
//! The autodiff layer in [`crate::autograd`] wraps these; they are public so that tests and
//! benches can drive them directly.

pub mod conv;
pub mod norm;
pub mod resample;

pub use conv::{conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGeometry};
pub use norm::{batch_norm_backward, batch_norm_forward, BatchNormSaved, BatchStats, NormMode, RunningStats};
pub use resample::{downsample_area, downsample_area_backward};
