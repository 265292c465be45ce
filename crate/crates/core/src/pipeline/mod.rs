//! Phantoms, file formats, training, inference and evaluation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod fvol;
pub mod glyphs;
pub mod infer;
pub mod phantom;
pub mod sphere;
pub mod standardize;
pub mod train;

pub use config::RunConfig;
pub use phantom::{PhantomSpec, Subject};
