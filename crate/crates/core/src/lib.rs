//! Depth-guided radiance field training from RGB-D images.
//!
//! The pipeline places a handful of samples per ray around the sensed surface
//! depth, evaluates one small MLP for density and color, composites the samples
//! with classic volume rendering and optimizes a joint color + depth loss.
//!
//! Modules, bottom-up:
//! - [`geometry`]: pinhole cameras, rays, projection.
//! - [`sampling`]: global/local stratified, Gaussian and adaptive ray sampling,
//!   multiview depth error maps.
//! - [`field`]: the radiance-field MLP with hand-written backward pass.
//! - [`renderer`]: alpha compositing and its gradient, ray/image rendering.
//! - [`trainer`]: losses, Adam, the training loop.
//! - [`dataset`]: procedural RGB-D scenes and on-disk dataset format.
//! - [`metrics`]: PSNR, SSIM, AbsRel and view evaluation.
//! - [`cli`]: configuration resolution and the `depth-nerf` subcommands.

pub mod cli;
pub mod dataset;
pub mod field;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod raster;
pub mod renderer;
pub mod sampling;
pub mod seed;
pub mod trainer;

mod error;

pub use error::{Error, Result};
