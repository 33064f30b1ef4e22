//! Block-wise susceptibility prediction and the evaluation harness:
//! raster assembly, quartile-level quantization, confusion metrics,
//! ROC/AUC, and repeated-run statistics.

pub mod experiment;

pub use experiment::{
    run_experiment, run_global_baseline, ExperimentConfig, ExperimentMode, ExperimentOutcome,
    RegionData, RunRecord,
};

use crate::error::{Error, Result};
use crate::geodata::{RasterGrid, RasterStack};
use crate::math::{forward, MlpParams};
use crate::segmentation::Segmentation;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Assembled probability raster plus its 4-level quantization.
#[derive(Debug, Clone)]
pub struct SusceptibilityMap {
    pub values: RasterGrid,
    pub levels: RasterGrid,
    pub skip: Vec<bool>,
    /// True when the level quantization degenerated (all values equal).
    pub degenerate_levels: bool,
}

/// Predicts per-cell probabilities with each block's adapted model,
/// falling back to the unadapted intermediate model for blocks without
/// one. Nodata cells stay masked.
pub fn predict_lsm(
    seg: &Segmentation,
    models: &BTreeMap<usize, MlpParams>,
    fallback: &MlpParams,
    stack: &RasterStack,
) -> Result<SusceptibilityMap> {
    let (cells, skip) = stack.featurize_all_cells();
    let mut values = stack.grid().clone();
    values.nodata = -1.0;
    values.values = vec![-1.0; values.cell_count()];
    let mut valid = Vec::with_capacity(cells.len());
    for fv in &cells {
        let block = seg.labels[fv.pixel_index];
        if block < 0 {
            return Err(Error::Data(format!(
                "cell {} is valid but owned by no block; partition invariant violated",
                fv.pixel_index
            )));
        }
        let model = models.get(&(block as usize)).unwrap_or(fallback);
        let p = forward(model, &fv.values)?;
        values.values[fv.pixel_index] = p;
        valid.push(p);
    }
    let (level_list, _, degenerate) = quantize_levels(&valid)?;
    let mut levels = values.clone();
    levels.nodata = 0.0;
    levels.values = vec![0.0; levels.cell_count()];
    for (fv, &lvl) in cells.iter().zip(level_list.iter()) {
        levels.values[fv.pixel_index] = lvl as f64;
    }
    Ok(SusceptibilityMap {
        values,
        levels,
        skip,
        degenerate_levels: degenerate,
    })
}

/// Four susceptibility levels with nearly equal counts: bin edges at the
/// nearest-rank 25/50/75 percentiles, ties assigned to the lower level.
/// Returns (levels, edges, degenerate-warning).
pub fn quantize_levels(values: &[f64]) -> Result<(Vec<u8>, [f64; 3], bool)> {
    if values.len() < 4 {
        return Err(Error::Argument(format!(
            "need at least 4 values to quantize, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let rank = |p: f64| -> f64 {
        let k = ((p * n as f64).ceil() as usize).clamp(1, n);
        sorted[k - 1]
    };
    let edges = [rank(0.25), rank(0.50), rank(0.75)];
    let degenerate = sorted[0] == sorted[n - 1];
    let levels = values
        .iter()
        .map(|&v| 1 + edges.iter().filter(|&&e| e < v).count() as u8)
        .collect();
    Ok((levels, edges, degenerate))
}

/// Confusion counts at a decision threshold (probability >= threshold is
/// a positive call).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn zero() -> ConfusionCounts {
        ConfusionCounts {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
        }
    }

    pub fn add(&mut self, probability: f64, label: u8, threshold: f64) {
        let positive = probability >= threshold;
        match (positive, label) {
            (true, 1) => self.tp += 1,
            (true, _) => self.fp += 1,
            (false, 1) => self.fn_ += 1,
            (false, _) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Accuracy / precision / recall / F1; a metric whose denominator is
/// zero is reported as None.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve by threshold sweep over distinct scores (equal scores fold
/// into one step) and AUC by the trapezoid rule, which equals the
/// tie-corrected pair-counting statistic.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument(
            "ROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume the whole tie group at once
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push(RocPoint {
            fpr,
            tpr,
            threshold,
        });
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok((points, auc))
}

/// Overall-accuracy statistics over repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStatistics {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl RunStatistics {
    pub fn from_runs(runs: Vec<f64>) -> Result<RunStatistics> {
        if runs.is_empty() {
            return Err(Error::Argument("no runs to aggregate".into()));
        }
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let min = runs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = runs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(RunStatistics {
            runs,
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_one_to_eight() {
        let (levels, _, degenerate) =
            quantize_levels(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(levels, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(!degenerate);
    }

    #[test]
    fn quantize_one_to_ten_bin_sizes() {
        // nearest-rank edges at 3, 5, 8 give bins (3, 2, 3, 2); regression-locked
        let values: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let (levels, edges, _) = quantize_levels(&values).unwrap();
        assert_eq!(edges, [3.0, 5.0, 8.0]);
        let counts = (1..=4)
            .map(|l| levels.iter().filter(|&&x| x == l).count())
            .collect::<Vec<_>>();
        assert_eq!(counts, vec![3, 2, 3, 2]);
    }

    #[test]
    fn quantize_all_equal_is_level_one_with_warning() {
        let (levels, _, degenerate) = quantize_levels(&[2.0; 6]).unwrap();
        assert!(levels.iter().all(|&l| l == 1));
        assert!(degenerate);
    }

    #[test]
    fn quantize_needs_four_values() {
        assert!(quantize_levels(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn metrics_hand_case() {
        let c = ConfusionCounts {
            tp: 3,
            tn: 4,
            fp: 1,
            fn_: 2,
        };
        let m = metrics(&c);
        assert_eq!(m.accuracy, Some(0.7));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.6));
        assert!((m.f1.unwrap() - 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_degenerate_corners() {
        let all_tp = ConfusionCounts {
            tp: 5,
            tn: 0,
            fp: 0,
            fn_: 0,
        };
        let m = metrics(&all_tp);
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(1.0));

        let all_fp = ConfusionCounts {
            tp: 0,
            tn: 0,
            fp: 5,
            fn_: 0,
        };
        let m = metrics(&all_fp);
        assert_eq!(m.accuracy, Some(0.0));
        assert_eq!(m.precision, Some(0.0));
        assert_eq!(m.recall, None);

        let m = metrics(&ConfusionCounts::zero());
        assert_eq!(m.accuracy, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn confusion_matches_brute_force_recount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(f64, u8)> = (0..500)
            .map(|_| (rng.gen::<f64>(), rng.gen_range(0..2) as u8))
            .collect();
        let mut c = ConfusionCounts::zero();
        for &(p, y) in &pairs {
            c.add(p, y, 0.5);
        }
        let tp = pairs.iter().filter(|&&(p, y)| p >= 0.5 && y == 1).count();
        let fp = pairs.iter().filter(|&&(p, y)| p >= 0.5 && y == 0).count();
        let fn_ = pairs.iter().filter(|&&(p, y)| p < 0.5 && y == 1).count();
        let tn = pairs.iter().filter(|&&(p, y)| p < 0.5 && y == 0).count();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
    }

    #[test]
    fn auc_hand_case() {
        // positives (0.9, 0.4), negatives (0.6, 0.2): 3 of 4 pairs ordered
        let (_, auc) = roc_auc(&[0.9, 0.4, 0.6, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_perfect_and_ties() {
        let (_, auc) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
        let (_, auc) = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_equals_pair_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        // quantized scores force plenty of ties
        let scores: Vec<f64> = (0..600).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
        let labels: Vec<u8> = (0..600).map(|_| rng.gen_range(0..2) as u8).collect();
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        // brute force: ties count 0.5
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            if labels[i] != 1 {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] != 0 {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        assert!((auc - num / den).abs() < 1e-12, "{auc} vs {}", num / den);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn run_statistics_single_run() {
        let s = RunStatistics::from_runs(vec![0.8]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.min, 0.8);
        assert_eq!(s.max, 0.8);
        assert_eq!(s.mean, 0.8);
    }

    #[test]
    fn run_statistics_orderings() {
        let s = RunStatistics::from_runs(vec![0.7, 0.9, 0.8]).unwrap();
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert!(s.std > 0.0);
    }
}
