//! Aligned multi-band raster stack with min-max normalization and
//! featurization of points and whole grids.

use super::grid::RasterGrid;
use super::samples::SamplePoint;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One normalized sample vector, optionally labeled and assigned to a
/// block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Per-band values in [0, 1].
    pub values: Vec<f64>,
    /// 0 = negative, 1 = positive, None = unlabeled.
    pub label: Option<u8>,
    /// Linear cell index (row * cols + col) the vector was read from.
    pub pixel_index: usize,
    /// Owning superpixel, once segmentation has run.
    pub block_id: Option<usize>,
}

/// Ordered, aligned thematic bands plus per-band normalization stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RasterStack {
    pub bands: Vec<(String, RasterGrid)>,
    /// Per-band (min, max) over valid cells.
    pub norm_stats: Vec<(f64, f64)>,
}

impl RasterStack {
    /// Builds a stack after checking that all bands share shape and
    /// georeferencing, and that no band is degenerate (min == max).
    pub fn build(grids: Vec<(String, RasterGrid)>) -> Result<RasterStack> {
        if grids.is_empty() {
            return Err(Error::Argument("stack needs at least one band".into()));
        }
        let (r0, c0) = (grids[0].1.rows, grids[0].1.cols);
        let (cs0, x0, y0) = (grids[0].1.cellsize, grids[0].1.xll, grids[0].1.yll);
        for (name, g) in &grids[1..] {
            if g.rows != r0 || g.cols != c0 {
                return Err(Error::Alignment(format!(
                    "band '{name}' is {}x{}, expected {r0}x{c0}",
                    g.rows, g.cols
                )));
            }
            if g.cellsize != cs0 || g.xll != x0 || g.yll != y0 {
                return Err(Error::Alignment(format!(
                    "band '{name}' georeferencing differs (cellsize/origin)"
                )));
            }
        }
        let mut norm_stats = Vec::with_capacity(grids.len());
        for (name, g) in &grids {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for &v in &g.values {
                if v != g.nodata {
                    min = min.min(v);
                    max = max.max(v);
                }
            }
            if !min.is_finite() || !max.is_finite() {
                return Err(Error::Config(format!("band '{name}' has no valid cells")));
            }
            if min == max {
                return Err(Error::Config(format!(
                    "degenerate band '{name}': min == max == {min}"
                )));
            }
            norm_stats.push((min, max));
        }
        Ok(RasterStack {
            bands: grids,
            norm_stats,
        })
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn rows(&self) -> usize {
        self.bands[0].1.rows
    }

    pub fn cols(&self) -> usize {
        self.bands[0].1.cols
    }

    pub fn grid(&self) -> &RasterGrid {
        &self.bands[0].1
    }

    /// Per-band (v - min) / (max - min), clamped to [0, 1].
    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.band_count() {
            return Err(Error::Shape(format!(
                "raw vector has {} entries, stack has {} bands",
                raw.len(),
                self.band_count()
            )));
        }
        Ok(raw
            .iter()
            .zip(self.norm_stats.iter())
            .map(|(&v, &(min, max))| ((v - min) / (max - min)).clamp(0.0, 1.0))
            .collect())
    }

    /// True if any band has nodata at the cell.
    pub fn any_nodata(&self, row: usize, col: usize) -> bool {
        self.bands.iter().any(|(_, g)| g.is_nodata(row, col))
    }

    /// Raw (unnormalized) per-band values at a cell; None on nodata.
    pub fn raw_at(&self, row: usize, col: usize) -> Option<Vec<f64>> {
        if self.any_nodata(row, col) {
            return None;
        }
        Some(self.bands.iter().map(|(_, g)| g.at(row, col)).collect())
    }

    /// Normalized values at a valid cell.
    pub fn normalized_at(&self, row: usize, col: usize) -> Option<Vec<f64>> {
        self.raw_at(row, col).map(|raw| {
            self.normalize(&raw)
                .expect("raw vector has band_count entries")
        })
    }

    /// Nearest-cell featurization of a sample point.
    pub fn featurize_point(&self, p: &SamplePoint) -> Result<FeatureVector> {
        let (row, col) = self.grid().cell_of(p.x, p.y)?;
        for (name, g) in &self.bands {
            if g.is_nodata(row, col) {
                return Err(Error::Nodata {
                    x: p.x,
                    y: p.y,
                    band: name.clone(),
                });
            }
        }
        let raw: Vec<f64> = self.bands.iter().map(|(_, g)| g.at(row, col)).collect();
        Ok(FeatureVector {
            values: self.normalize(&raw)?,
            label: p.label,
            pixel_index: row * self.cols() + col,
            block_id: None,
        })
    }

    /// One vector per valid cell in row-major order, plus a skip mask
    /// marking cells with nodata in any band.
    pub fn featurize_all_cells(&self) -> (Vec<FeatureVector>, Vec<bool>) {
        let rows = self.rows();
        let cols = self.cols();
        let mut out = Vec::with_capacity(rows * cols);
        let mut skip = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                match self.normalized_at(r, c) {
                    Some(values) => out.push(FeatureVector {
                        values,
                        label: None,
                        pixel_index: r * cols + c,
                        block_id: None,
                    }),
                    None => skip[r * cols + c] = true,
                }
            }
        }
        (out, skip)
    }
}
