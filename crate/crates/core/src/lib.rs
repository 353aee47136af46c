//! Hardness-aware semantic scene completion: hard voxel mining, local
//! geometric anisotropy weighting and mean-teacher self-distillation on a
//! small trainable voxel model.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod distill;
pub mod error;
pub mod grid;
pub mod hardness;
pub mod losses;
pub mod metrics;
pub mod toymodel;
pub mod train;
pub mod selection;

pub use error::{Error, Result};
