//! Block-wise few-shot landslide susceptibility mapping.
//!
//! The pipeline: load aligned thematic rasters and labeled sample points,
//! segment the scene into superpixel blocks with a weighted SLIC, build
//! per-block meta-tasks, pretrain a representation with stacked RBMs and
//! a denoising autoencoder, meta-train an intermediate model with a
//! weighted MAML objective, adapt it per block with a few gradient steps,
//! and assemble a susceptibility raster with a full evaluation harness.

pub mod error;
pub mod geodata;
pub mod math;
pub mod pretrain;
pub mod segmentation;
pub mod tasks;

pub use error::{Error, Result};
pub use math::{Matrix, MlpParams, Tape};
