//! Meta-task construction: one task per eligible block, the 60/40
//! train/test task split, support/query splits, and the sample-count
//! softmax task weights.

use crate::error::{Error, Result};
use crate::geodata::FeatureVector;
use crate::segmentation::Block;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of support samples drawn for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KShot {
    Fixed(usize),
    /// floor(n_k / 2) per task.
    Half,
}

impl KShot {
    pub fn resolve(&self, n_k: usize) -> usize {
        match self {
            KShot::Fixed(k) => *k,
            KShot::Half => n_k / 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaTask {
    /// Block id this task was sampled from.
    pub task_id: usize,
    /// Indices into the labeled sample list.
    pub sample_indices: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Total sample count n_k.
    pub n_k: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaDatasets {
    pub train_tasks: Vec<MetaTask>,
    pub test_tasks: Vec<MetaTask>,
    /// Total labeled samples across all constructed tasks.
    pub n_total: usize,
    pub seed: u64,
}

/// Blocks that could not become tasks, and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludedBlock {
    pub block_id: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// One task per block holding at least `min_per_class` samples of each
/// class. Ineligible blocks are reported; their region falls back to the
/// unadapted intermediate model at prediction time.
pub fn build_tasks(
    blocks: &[Block],
    samples: &[FeatureVector],
    min_per_class: usize,
) -> Result<(Vec<MetaTask>, Vec<ExcludedBlock>)> {
    let mut tasks = Vec::new();
    let mut excluded = Vec::new();
    for block in blocks {
        let mut positives = 0;
        let mut negatives = 0;
        for &i in &block.member_samples {
            match samples[i].label {
                Some(1) => positives += 1,
                Some(0) => negatives += 1,
                _ => {}
            }
        }
        if positives >= min_per_class && negatives >= min_per_class && positives + negatives > 0 {
            let sample_indices: Vec<usize> = block
                .member_samples
                .iter()
                .copied()
                .filter(|&i| samples[i].label.is_some())
                .collect();
            tasks.push(MetaTask {
                task_id: block.id,
                n_k: sample_indices.len(),
                sample_indices,
                support: Vec::new(),
                query: Vec::new(),
                positives,
                negatives,
            });
        } else {
            excluded.push(ExcludedBlock {
                block_id: block.id,
                positives,
                negatives,
            });
        }
    }
    if tasks.is_empty() {
        return Err(Error::Data(
            "no block has enough labeled samples to form a task".into(),
        ));
    }
    Ok((tasks, excluded))
}

/// Uniform shuffle by seed; the first floor(fraction * n) tasks train.
pub fn split_tasks(tasks: Vec<MetaTask>, fraction: f64, seed: u64) -> Result<MetaDatasets> {
    if tasks.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 tasks to split, got {}",
            tasks.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!("fraction {fraction} not in [0,1]")));
    }
    let n_total = tasks.iter().map(|t| t.n_k).sum();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((tasks.len() as f64) * fraction).floor() as usize;
    let mut tasks: Vec<Option<MetaTask>> = tasks.into_iter().map(Some).collect();
    let train_tasks = order[..n_train]
        .iter()
        .map(|&i| tasks[i].take().unwrap())
        .collect();
    let test_tasks = order[n_train..]
        .iter()
        .map(|&i| tasks[i].take().unwrap())
        .collect();
    Ok(MetaDatasets {
        train_tasks,
        test_tasks,
        n_total,
        seed,
    })
}

/// Fills the support/query split. The support draw is class-balanced as
/// far as possible: positives and negatives alternate (positives first),
/// and once one class runs out the remainder comes from the other.
pub fn split_support_query(
    task: &mut MetaTask,
    samples: &[FeatureVector],
    k_shot: KShot,
    seed: u64,
) -> Result<()> {
    let k = k_shot.resolve(task.n_k).max(1);
    if k >= task.n_k {
        return Err(Error::Argument(format!(
            "k_shot {k} leaves an empty query set for task {} (n_k = {})",
            task.task_id, task.n_k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = task
        .sample_indices
        .iter()
        .copied()
        .filter(|&i| samples[i].label == Some(1))
        .collect();
    let mut neg: Vec<usize> = task
        .sample_indices
        .iter()
        .copied()
        .filter(|&i| samples[i].label == Some(0))
        .collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut support = Vec::with_capacity(k);
    let mut take_pos = true;
    while support.len() < k {
        let next = if take_pos {
            pos.pop().or_else(|| neg.pop())
        } else {
            neg.pop().or_else(|| pos.pop())
        };
        match next {
            Some(i) => support.push(i),
            None => break,
        }
        take_pos = !take_pos;
    }
    let mut query: Vec<usize> = pos;
    query.extend(neg);
    query.sort_unstable();
    support.sort_unstable();
    task.support = support;
    task.query = query;
    Ok(())
}

/// Eq-style softmax weights over n_k / n_total for a meta-batch. The
/// weights sum to one by construction.
pub fn task_weights(batch_sizes: &[usize], n_total: usize) -> Result<Vec<f64>> {
    if batch_sizes.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if n_total == 0 {
        return Err(Error::Argument("n_total must be positive".into()));
    }
    let exps: Vec<f64> = batch_sizes
        .iter()
        .map(|&n| (n as f64 / n_total as f64).exp())
        .collect();
    let denom: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / denom).collect())
}
