//! Globally guided image harmonization toolkit.
//!
//! Four largely independent pieces share a common image representation:
//!
//! - [`color`]: polynomial color matching fitted on 24-patch color-checker
//!   correspondences, with the standard illumination condition as a
//!   transitional state.
//! - [`dataset`]: construction of (composite, real, mask) triplets by
//!   transferring foreground illumination between images, with a
//!   reproducible manifest and validation.
//! - [`metrics`]: MSE / fMSE / PSNR / fSSIM over harmonization outputs.
//! - [`gift`]: a desk-scale modulated-convolution network with
//!   foreground-background relation distillation, exact reverse-mode
//!   gradients, and a toy two-branch training harness.
//! - [`bt`]: Bradley-Terry global ranking from pairwise preferences.
//!
//! Everything is deterministic under a fixed seed and safe to call from
//! multiple threads; nothing holds shared mutable state.

pub mod bt;
pub mod color;
pub mod dataset;
pub mod error;
pub mod gift;
pub mod metrics;
pub mod raster;
mod util;

pub use error::{Error, Result};
