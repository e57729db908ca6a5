//! Self-supervised pixel matching for video object segmentation.
//!
//! A small reverse-mode autodiff engine drives an embedding network and a cascade of
//! deformable matching layers. Training reconstructs a target frame's colors by warping a
//! reference frame; inference warps per-class binary maps of the previous mask the same way.

pub mod autograd;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use autograd::{Graph, Var};
pub use deform::{bilinear_sample, deform_conv2d, warp, KernelGrid, OffsetField};
pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, ModelParams, Variant};
pub use scalar::Scalar;
pub use tensor::{gaussian_init, Tensor};
pub use video::{SegmentationMask, VideoSequence};
