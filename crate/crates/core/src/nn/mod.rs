//! Minimal reverse-mode engine and the conditional denoiser built on it.

pub mod checkpoint;
pub mod denoiser;
pub mod params;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use denoiser::{Denoiser, DenoiserConfig, ForwardParts};
pub use params::{adam_step, AdamState, ParamId, ParamStore};
