//! Guided depth map upsampling with deformable kernel networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: a small NCHW tensor type and a dynamic
//!   reverse-mode tape with exactly the operations the networks need.
//! - [`filtering`]: bilinear sampling, offset restriction, the deformable
//!   weighted average and bicubic resampling.
//! - [`model`]: the DKN (patch-based, stride-4 feature stack) and FDKN
//!   (pixel-unshuffled, single pass) architectures.
//! - [`inference`]: shift-and-stitch, shift-and-stack and full-image upsampling.
//! - [`training`]: L1 loss, Adam, the step schedule, synthetic scenes and
//!   checkpoints.
//! - [`io`] and [`metrics`]: netpbm/PFM files, datasets and RMSE reports.

pub mod autograd;
pub mod error;
pub mod filtering;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
