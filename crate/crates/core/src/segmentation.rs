//! Modified SLIC over the normalized multiband raster.
//!
//! Centers start on an S x S lattice, move to the lowest-gradient cell in
//! a 5 x 5 neighborhood, then pixels are assigned within 2S windows by a
//! weighted feature + spatial distance. After each sweep centers move to
//! the mean feature/position of their members. Tie-breaking is fully
//! specified (scan order for perturbation, smallest center id for
//! assignment), so a fixed config and input give an identical
//! segmentation every time.

use crate::error::{Error, Result};
use crate::geodata::{FeatureVector, RasterGrid, RasterStack};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// The distance exactly as published: the feature term is a squared
    /// norm that is squared again inside D.
    VerbatimEq2,
    /// Standard SLIC: the feature term is the Euclidean norm.
    Euclidean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicConfig {
    /// Target block count.
    pub k: usize,
    /// Weight trading feature similarity against spatial proximity.
    pub compactness: f64,
    /// Per-band importance weights; None means uniform 1.0.
    pub feature_weights: Option<Vec<f64>>,
    pub iterations: usize,
    pub distance_mode: DistanceMode,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            k: 64,
            compactness: 1.0,
            feature_weights: None,
            iterations: 5,
            distance_mode: DistanceMode::VerbatimEq2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub id: usize,
    /// Weighted-space feature values.
    pub features: Vec<f64>,
    /// Fractional pixel coordinates.
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub center: ClusterCenter,
    /// Linear cell indices owned by this block.
    pub member_pixels: Vec<usize>,
    /// Indices into the labeled sample list, filled by `group_samples`.
    pub member_samples: Vec<usize>,
}

/// Weighted normalized feature field backing all SLIC distance math.
pub struct FeatureField {
    pub rows: usize,
    pub cols: usize,
    pub dims: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
    valid_count: usize,
}

impl FeatureField {
    pub fn from_stack(stack: &RasterStack, config: &SlicConfig) -> Result<FeatureField> {
        let dims = stack.band_count();
        let weights = match &config.feature_weights {
            Some(w) => {
                if w.len() != dims {
                    return Err(Error::Config(format!(
                        "{} feature weights for {} bands",
                        w.len(),
                        dims
                    )));
                }
                if w.iter().any(|&x| x < 0.0) || w.iter().all(|&x| x == 0.0) {
                    return Err(Error::Config(
                        "feature weights must be non-negative with at least one positive".into(),
                    ));
                }
                w.clone()
            }
            None => vec![1.0; dims],
        };
        let rows = stack.rows();
        let cols = stack.cols();
        let mut data = vec![0.0; rows * cols * dims];
        let mut valid = vec![false; rows * cols];
        let mut valid_count = 0;
        for r in 0..rows {
            for c in 0..cols {
                if let Some(v) = stack.normalized_at(r, c) {
                    let idx = r * cols + c;
                    valid[idx] = true;
                    valid_count += 1;
                    for (d, (&x, &w)) in v.iter().zip(weights.iter()).enumerate() {
                        data[idx * dims + d] = x * w;
                    }
                }
            }
        }
        if valid_count == 0 {
            return Err(Error::Data("no valid pixels in the stack".into()));
        }
        Ok(FeatureField {
            rows,
            cols,
            dims,
            data,
            valid,
            valid_count,
        })
    }

    #[inline]
    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid[r * self.cols + c]
    }

    #[inline]
    pub fn features(&self, r: usize, c: usize) -> &[f64] {
        let idx = r * self.cols + c;
        &self.data[idx * self.dims..(idx + 1) * self.dims]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    /// Squared feature-space gradient at a cell via central differences,
    /// neighbors clamped to the grid; nodata neighbors contribute zero.
    fn gradient(&self, r: usize, c: usize) -> f64 {
        let fallback = self.features(r, c);
        let pick = |rr: usize, cc: usize| -> &[f64] {
            if self.is_valid(rr, cc) {
                self.features(rr, cc)
            } else {
                fallback
            }
        };
        let left = pick(r, c.saturating_sub(1));
        let right = pick(r, (c + 1).min(self.cols - 1));
        let up = pick(r.saturating_sub(1), c);
        let down = pick((r + 1).min(self.rows - 1), c);
        let mut g = 0.0;
        for d in 0..self.dims {
            let dx = right[d] - left[d];
            let dy = down[d] - up[d];
            g += dx * dx + dy * dy;
        }
        g
    }
}

/// Lattice spacing S = round(sqrt(N / K)), half away from zero, at least 1.
pub fn lattice_spacing(valid_pixels: usize, k: usize) -> usize {
    ((valid_pixels as f64 / k as f64).sqrt().round() as usize).max(1)
}

/// Centers on the grid-cell centers of an S x S lattice. The actual count
/// is ceil(rows/S) * ceil(cols/S), which can differ slightly from K.
pub fn init_centers(field: &FeatureField, config: &SlicConfig) -> Result<Vec<ClusterCenter>> {
    let n = field.valid_count();
    if config.k < 1 || config.k > n {
        return Err(Error::Argument(format!(
            "K = {} must be in 1..={n}",
            config.k
        )));
    }
    let s = lattice_spacing(n, config.k);
    let lat_rows = field.rows.div_ceil(s);
    let lat_cols = field.cols.div_ceil(s);
    let mut centers = Vec::new();
    for gi in 0..lat_rows {
        for gj in 0..lat_cols {
            let r0 = (gi * s + s / 2).min(field.rows - 1);
            let c0 = (gj * s + s / 2).min(field.cols - 1);
            // If the lattice midpoint is nodata, take the first valid cell
            // of the lattice cell in scan order; skip fully-invalid cells.
            let cell = if field.is_valid(r0, c0) {
                Some((r0, c0))
            } else {
                let mut found = None;
                'scan: for r in gi * s..((gi + 1) * s).min(field.rows) {
                    for c in gj * s..((gj + 1) * s).min(field.cols) {
                        if field.is_valid(r, c) {
                            found = Some((r, c));
                            break 'scan;
                        }
                    }
                }
                found
            };
            if let Some((r, c)) = cell {
                centers.push(ClusterCenter {
                    id: centers.len(),
                    features: field.features(r, c).to_vec(),
                    row: r as f64,
                    col: c as f64,
                });
            }
        }
    }
    Ok(centers)
}

/// Moves each center to the lowest-gradient cell in its 5 x 5
/// neighborhood (clamped at borders). Ties go to the first minimum in
/// row-major scan order.
pub fn perturb_centers(field: &FeatureField, centers: &mut [ClusterCenter]) {
    for center in centers.iter_mut() {
        let cr = center.row.round() as isize;
        let cc = center.col.round() as isize;
        let r0 = (cr - 2).max(0) as usize;
        let r1 = ((cr + 2).min(field.rows as isize - 1)) as usize;
        let c0 = (cc - 2).max(0) as usize;
        let c1 = ((cc + 2).min(field.cols as isize - 1)) as usize;
        let mut best = f64::INFINITY;
        let mut best_cell = None;
        for r in r0..=r1 {
            for c in c0..=c1 {
                if !field.is_valid(r, c) {
                    continue;
                }
                let g = field.gradient(r, c);
                if g < best {
                    best = g;
                    best_cell = Some((r, c));
                }
            }
        }
        if let Some((r, c)) = best_cell {
            center.row = r as f64;
            center.col = c as f64;
            center.features = field.features(r, c).to_vec();
        }
    }
}

fn distance(
    center: &ClusterCenter,
    feats: &[f64],
    r: usize,
    c: usize,
    s: usize,
    config: &SlicConfig,
) -> f64 {
    let mut df2 = 0.0;
    for (a, b) in center.features.iter().zip(feats.iter()) {
        let d = a - b;
        df2 += d * d;
    }
    let d_f = match config.distance_mode {
        DistanceMode::VerbatimEq2 => df2,
        DistanceMode::Euclidean => df2.sqrt(),
    };
    let dr = r as f64 - center.row;
    let dc = c as f64 - center.col;
    let d_s = (dr * dr + dc * dc).sqrt();
    let m = config.compactness;
    (d_f * d_f + (d_s / s as f64).powi(2) * m * m).sqrt()
}

/// Result of the assignment loop: per-cell owner (-1 for nodata cells),
/// per-cell final distance, and the updated centers.
pub struct Assignment {
    pub labels: Vec<i32>,
    pub distances: Vec<f64>,
    pub centers: Vec<ClusterCenter>,
    pub s: usize,
}

/// Runs `iterations` sweeps. Each sweep resets (l_i, d_i) to (-1, inf),
/// scans a (2S+1)-wide window around every center, keeps the minimal
/// distance (ties to the smallest center id), repairs orphans by nearest
/// spatial center, then moves centers to their members' mean.
pub fn assign_pixels(
    field: &FeatureField,
    mut centers: Vec<ClusterCenter>,
    config: &SlicConfig,
) -> Assignment {
    let s = lattice_spacing(field.valid_count(), config.k);
    let ncells = field.rows * field.cols;
    let mut labels = vec![-1i32; ncells];
    let mut dists = vec![f64::INFINITY; ncells];

    for sweep in 0..config.iterations.max(1) {
        labels.iter_mut().for_each(|l| *l = -1);
        dists.iter_mut().for_each(|d| *d = f64::INFINITY);

        for center in &centers {
            let cr = center.row.round() as isize;
            let cc = center.col.round() as isize;
            let si = s as isize;
            let r0 = (cr - si).max(0) as usize;
            let r1 = ((cr + si).min(field.rows as isize - 1)) as usize;
            let c0 = (cc - si).max(0) as usize;
            let c1 = ((cc + si).min(field.cols as isize - 1)) as usize;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if !field.is_valid(r, c) {
                        continue;
                    }
                    let idx = r * field.cols + c;
                    let d = distance(center, field.features(r, c), r, c, s, config);
                    // Strict improvement only: earlier (smaller) center ids
                    // win ties, and a pixel's stored d_i never increases
                    // within a sweep.
                    if d < dists[idx] {
                        dists[idx] = d;
                        labels[idx] = center.id as i32;
                    }
                }
            }
        }

        // Orphan repair: anything no window reached goes to the spatially
        // nearest center.
        for r in 0..field.rows {
            for c in 0..field.cols {
                let idx = r * field.cols + c;
                if !field.is_valid(r, c) || labels[idx] != -1 {
                    continue;
                }
                let mut best = f64::INFINITY;
                let mut best_id = -1;
                for center in &centers {
                    let dr = r as f64 - center.row;
                    let dc = c as f64 - center.col;
                    let d = dr * dr + dc * dc;
                    if d < best {
                        best = d;
                        best_id = center.id as i32;
                    }
                }
                labels[idx] = best_id;
                dists[idx] = f64::INFINITY; // repaired, not window-scanned
            }
        }

        let last_sweep = sweep + 1 == config.iterations.max(1);
        if last_sweep {
            break;
        }

        // Barrier: recompute each center as the mean feature/position of
        // its members. Empty centers stay where they are.
        let mut sums: Vec<(Vec<f64>, f64, f64, usize)> = centers
            .iter()
            .map(|_| (vec![0.0; field.dims], 0.0, 0.0, 0usize))
            .collect();
        for r in 0..field.rows {
            for c in 0..field.cols {
                let idx = r * field.cols + c;
                if labels[idx] < 0 {
                    continue;
                }
                let k = labels[idx] as usize;
                let feats = field.features(r, c);
                let acc = &mut sums[k];
                for (a, &f) in acc.0.iter_mut().zip(feats.iter()) {
                    *a += f;
                }
                acc.1 += r as f64;
                acc.2 += c as f64;
                acc.3 += 1;
            }
        }
        for (center, (fsum, rsum, csum, count)) in centers.iter_mut().zip(sums.into_iter()) {
            if count == 0 {
                continue;
            }
            let n = count as f64;
            center.features = fsum.into_iter().map(|v| v / n).collect();
            center.row = rsum / n;
            center.col = csum / n;
        }
    }

    Assignment {
        labels,
        distances: dists,
        centers,
        s,
    }
}

/// Full segmentation output.
#[derive(Debug)]
pub struct Segmentation {
    pub blocks: Vec<Block>,
    /// Per-cell owning block id, -1 on nodata cells.
    pub labels: Vec<i32>,
    pub s: usize,
    pub rows: usize,
    pub cols: usize,
    /// Indices of labeled samples that fell on skipped cells.
    pub excluded_samples: Vec<usize>,
}

/// init -> perturb -> iterative assignment, then blocks from the final
/// labels.
pub fn segment(stack: &RasterStack, config: &SlicConfig) -> Result<Segmentation> {
    let field = FeatureField::from_stack(stack, config)?;
    let mut centers = init_centers(&field, config)?;
    perturb_centers(&field, &mut centers);
    let assignment = assign_pixels(&field, centers, config);

    let mut blocks: Vec<Block> = assignment
        .centers
        .iter()
        .map(|c| Block {
            id: c.id,
            center: c.clone(),
            member_pixels: Vec::new(),
            member_samples: Vec::new(),
        })
        .collect();
    for (idx, &l) in assignment.labels.iter().enumerate() {
        if l >= 0 {
            blocks[l as usize].member_pixels.push(idx);
        }
    }
    Ok(Segmentation {
        blocks,
        labels: assignment.labels,
        s: assignment.s,
        rows: field.rows,
        cols: field.cols,
        excluded_samples: Vec::new(),
    })
}

/// Appends each labeled sample to the block owning its pixel. Samples on
/// skipped cells land in the exclusion report rather than failing the
/// run. Also writes the block id back onto the vectors.
pub fn group_samples(seg: &mut Segmentation, samples: &mut [FeatureVector]) {
    for block in seg.blocks.iter_mut() {
        block.member_samples.clear();
    }
    seg.excluded_samples.clear();
    for (i, fv) in samples.iter_mut().enumerate() {
        let l = seg.labels[fv.pixel_index];
        if l < 0 {
            seg.excluded_samples.push(i);
            fv.block_id = None;
        } else {
            fv.block_id = Some(l as usize);
            seg.blocks[l as usize].member_samples.push(i);
        }
    }
}

/// Block-id raster for export: ids as floats, nodata where skipped.
pub fn label_raster(seg: &Segmentation, template: &RasterGrid) -> RasterGrid {
    let mut grid = template.clone();
    grid.nodata = -1.0;
    grid.values = seg.labels.iter().map(|&l| l as f64).collect();
    grid
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlockReport {
    pub id: usize,
    pub pixel_count: usize,
    pub sample_count: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub lattice_spacing: usize,
    pub block_count: usize,
    pub excluded_samples: Vec<usize>,
    pub blocks: Vec<BlockReport>,
}

pub fn segmentation_report(seg: &Segmentation, samples: &[FeatureVector]) -> SegmentationReport {
    SegmentationReport {
        lattice_spacing: seg.s,
        block_count: seg.blocks.len(),
        excluded_samples: seg.excluded_samples.clone(),
        blocks: seg
            .blocks
            .iter()
            .map(|b| {
                let positives = b
                    .member_samples
                    .iter()
                    .filter(|&&i| samples[i].label == Some(1))
                    .count();
                BlockReport {
                    id: b.id,
                    pixel_count: b.member_pixels.len(),
                    sample_count: b.member_samples.len(),
                    positives,
                    negatives: b.member_samples.len() - positives,
                }
            })
            .collect(),
    }
}


#[cfg(test)]
impl SlicConfig {
    fn default_for_test(k: usize) -> SlicConfig {
        SlicConfig {
            k,
            ..Default::default()
        }
    }
}
