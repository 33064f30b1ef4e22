//! Raster loading, stacking, normalization, and featurization.

pub mod grid;
pub mod samples;
pub mod stack;

pub use grid::{format_ascii_grid, load_ascii_grid, parse_ascii_grid, write_ascii_grid, RasterGrid};
pub use samples::{load_samples_csv, write_samples_csv, SamplePoint};
pub use stack::{FeatureVector, RasterStack};
