//! The meta-learner: per-task inner-loop adaptation, the weighted
//! meta-objective optimized by Adam, and few-shot adaptation of the
//! intermediate model to new tasks.

use crate::error::{Error, Result};
use crate::geodata::FeatureVector;
use crate::math::{
    adapt_values, meta_grad, AdamState, Batch, GradMode, MlpParams, WeightedTask,
};
use crate::tasks::{task_weights, MetaTask};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the per-task weights of the meta-objective are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Softmax over n_k / n_total across the batch.
    SampleCountSoftmax,
    /// Uniform 1 / batch_size (the ablation arm).
    Uniform,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop learning rate.
    pub alpha: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub meta_epochs: usize,
    pub task_batch_size: usize,
    pub grad_mode: GradMode,
    pub weight_mode: WeightMode,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.1,
            inner_steps: 5,
            meta_lr: 1e-4,
            meta_epochs: 5000,
            task_batch_size: 4,
            grad_mode: GradMode::SecondOrder,
            weight_mode: WeightMode::SampleCountSoftmax,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.inner_steps < 1 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.task_batch_size < 1 {
            return Err(Error::Config("task_batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub weighted_loss: f64,
    pub task_ids: Vec<usize>,
}

/// The meta-trained model f' plus its training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntermediateModel {
    pub params: MlpParams,
    pub log: Vec<EpochLog>,
}

/// A task with its support/query batches materialized.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub n_k: usize,
    pub support: Batch,
    pub query: Batch,
}

pub fn batch_from_indices(samples: &[FeatureVector], indices: &[usize]) -> Result<Batch> {
    let rows: Vec<(&[f64], f64)> = indices
        .iter()
        .map(|&i| {
            let fv = &samples[i];
            let y = fv.label.ok_or_else(|| {
                Error::Data(format!("sample {i} has no label but entered a task"))
            })?;
            Ok((fv.values.as_slice(), y as f64))
        })
        .collect::<Result<_>>()?;
    Batch::from_rows(&rows)
}

/// Materializes support/query batches for a split task.
pub fn task_data(task: &MetaTask, samples: &[FeatureVector]) -> Result<TaskData> {
    if task.support.is_empty() || task.query.is_empty() {
        return Err(Error::Argument(format!(
            "task {} has no support/query split",
            task.task_id
        )));
    }
    Ok(TaskData {
        task_id: task.task_id,
        n_k: task.n_k,
        support: batch_from_indices(samples, &task.support)?,
        query: batch_from_indices(samples, &task.query)?,
    })
}

/// `steps` full-batch SGD steps on the support cross-entropy, starting
/// from theta. The trajectory endpoint is returned; taping happens only
/// inside the meta-gradient, not here.
pub fn inner_adapt(
    theta: &MlpParams,
    support: &Batch,
    alpha: f64,
    steps: usize,
) -> Result<MlpParams> {
    adapt_values(theta, support, alpha, steps)
}

/// Few-shot adaptation of the intermediate model: identical computation
/// to the inner loop, at the published defaults.
pub fn few_shot_adapt(
    intermediate: &MlpParams,
    support: &Batch,
    alpha: f64,
    steps: usize,
) -> Result<MlpParams> {
    adapt_values(intermediate, support, alpha, steps)
}

/// Meta-training: every epoch samples a task batch, adapts each task on
/// its support set, evaluates query losses at the adapted parameters,
/// and Adam-updates theta against the weighted sum. Aborts on a
/// non-finite meta-loss rather than clipping.
pub fn meta_train(
    f0: &MlpParams,
    train_tasks: &[TaskData],
    n_total: usize,
    config: &MetaConfig,
) -> Result<IntermediateModel> {
    config.validate()?;
    if train_tasks.is_empty() {
        return Err(Error::Argument("no training tasks".into()));
    }
    let mut params = f0.clone();
    let mut adam = AdamState::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.meta_epochs);
    let batch_size = config.task_batch_size.min(train_tasks.len());
    let mut order: Vec<usize> = (0..train_tasks.len()).collect();

    for epoch in 0..config.meta_epochs {
        order.shuffle(&mut rng);
        let picked = &order[..batch_size];
        let sizes: Vec<usize> = picked.iter().map(|&i| train_tasks[i].n_k).collect();
        let weights = match config.weight_mode {
            WeightMode::SampleCountSoftmax => task_weights(&sizes, n_total)?,
            WeightMode::Uniform => vec![1.0 / batch_size as f64; batch_size],
        };
        let batch: Vec<WeightedTask> = picked
            .iter()
            .zip(weights.iter())
            .map(|(&i, &w)| WeightedTask {
                support: train_tasks[i].support.clone(),
                query: train_tasks[i].query.clone(),
                weight: w,
            })
            .collect();
        let (loss, grad) = meta_grad(
            &params,
            &batch,
            config.alpha,
            config.inner_steps,
            config.grad_mode,
        )?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "meta-loss became non-finite at epoch {epoch}"
            )));
        }
        let mut flat = params.flatten();
        adam.step(&mut flat, &grad.flatten(), config.meta_lr)?;
        params.unflatten_into(&flat)?;
        if !params.is_finite() {
            return Err(Error::Divergence(format!(
                "parameters became non-finite at epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            weighted_loss: loss,
            task_ids: picked.iter().map(|&i| train_tasks[i].task_id).collect(),
        });
    }
    Ok(IntermediateModel { params, log })
}
