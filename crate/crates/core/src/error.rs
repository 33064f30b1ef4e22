//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between tensors/layers/rasters.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument to an operation (empty batch, bad count, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Text-format parse failure with 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Raster bands disagree on shape or georeferencing.
    #[error("band alignment: {0}")]
    Alignment(String),

    /// Configuration is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a contract (missing region, bad labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Query point falls outside the raster extent.
    #[error("point ({x}, {y}) outside raster extent")]
    OutOfBounds { x: f64, y: f64 },

    /// Query point falls on a nodata cell.
    #[error("point ({x}, {y}) hits nodata in band '{band}'")]
    Nodata { x: f64, y: f64, band: String },

    /// Training produced a non-finite value; aborted rather than clipped.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage '{stage}': {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach a pipeline stage name to an error.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Shape(_) => 2,
            Error::Divergence(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
