//! Conditional 3D patch diffusion for angular super-resolution of fiber
//! orientation distributions.
//!
//! A low-angular-resolution FOD volume (45 real even-order SH coefficients per
//! voxel, usually with degraded high orders) is turned into a
//! high-angular-resolution estimate by a conditional DDPM that runs on
//! overlapping 3D patches. The building blocks:
//!
//! - [`sh`]: real SH basis, reconstruction and the angular correlation metric.
//! - [`volume`]: multi-channel volumes, masks, cropping, tiling and merging.
//! - [`fpa`]: white-matter-weighted patch sampling for training.
//! - [`ccm`]: Fourier positional encoding of voxel coordinates.
//! - [`diffusion`]: cosine noise schedule, forward and reverse chains.
//! - [`nn`]: a small autodiff engine and the denoising network.
//! - [`pipeline`]: phantoms, file formats, training, inference, evaluation.

mod binio;
pub mod ccm;
pub mod diffusion;
pub mod error;
pub mod fpa;
pub mod nn;
pub mod pipeline;
pub mod sh;
pub mod volume;

pub use error::{Error, Result};
