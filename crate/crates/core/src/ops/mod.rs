//! Structural operators: convolutions, voxel (un)shuffle, instance
//! normalization and trilinear upsampling.
//!
//! These are plain functions on [`Tensor`](crate::tensor::Tensor)s. The
//! differentiable versions live on [`Tape`](crate::tensor::Tape).

pub(crate) mod conv;
pub(crate) mod norm;
pub(crate) mod shuffle;
pub(crate) mod upsample;

pub use conv::{conv3d, conv_axial, conv_slice, Conv, ConvSpec};
pub use norm::{instance_norm, DEFAULT_EPS};
pub use shuffle::{voxel_shuffle, voxel_unshuffle};
pub use upsample::upsample_trilinear;
