//! Experiment modes A-D: region-level train/test splits, repeated runs
//! with derived seeds, and the global-MLP control arm.
//!
//! A: train on part of region 1, test the held-out part of region 1.
//! B: train on all of region 1, test all of region 2.
//! C: train on parts of both regions, test the held-out part of region 1.
//! D: train on region 1 plus part of region 2, test the rest of region 2.

use super::{metrics, roc_auc, ConfusionCounts, Metrics, RocPoint, RunStatistics};
use crate::error::{Error, Result};
use crate::geodata::{FeatureVector, RasterStack, SamplePoint};
use crate::math::{forward, AdamState, MlpParams};
use crate::metalearn::{
    batch_from_indices, few_shot_adapt, meta_train, task_data, MetaConfig, TaskData,
};
use crate::pretrain::{greedy_pretrain, PretrainConfig};
use crate::seeds::derive_seed;
use crate::segmentation::{group_samples, segment, Segmentation, SlicConfig};
use crate::tasks::{build_tasks, split_support_query, split_tasks, KShot, MetaTask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentMode {
    A,
    B,
    C,
    D,
}

impl ExperimentMode {
    pub fn regions_needed(&self) -> usize {
        match self {
            ExperimentMode::A => 1,
            _ => 2,
        }
    }
}

impl std::str::FromStr for ExperimentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<ExperimentMode> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(ExperimentMode::A),
            "B" => Ok(ExperimentMode::B),
            "C" => Ok(ExperimentMode::C),
            "D" => Ok(ExperimentMode::D),
            other => Err(Error::Config(format!("unknown experiment mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub k_shot: KShot,
    pub repeats: usize,
    /// Tasks need this many samples to enter an experiment (the paper's
    /// task tables assume more than 5 samples per task).
    pub min_task_samples: usize,
    pub min_per_class: usize,
    pub train_fraction: f64,
    pub slic: SlicConfig,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    /// Full-batch Adam steps for the global-MLP control.
    pub baseline_epochs: usize,
    pub threshold: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if let KShot::Fixed(k) = self.k_shot {
            if self.min_task_samples <= k {
                return Err(Error::Config(format!(
                    "min_task_samples {} must exceed k_shot {k} so queries stay non-empty",
                    self.min_task_samples
                )));
            }
        }
        self.meta.validate()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: ExperimentMode::A,
            k_shot: KShot::Fixed(5),
            repeats: 10,
            min_task_samples: 6,
            min_per_class: 1,
            train_fraction: 0.6,
            slic: SlicConfig::default(),
            pretrain: PretrainConfig::default(),
            meta: MetaConfig::default(),
            baseline_epochs: 500,
            threshold: 0.5,
        }
    }
}

/// A region prepared for experiments: featurized labeled samples,
/// a segmentation with samples grouped, and the eligible task pool.
pub struct RegionData {
    pub name: String,
    pub stack: RasterStack,
    pub samples: Vec<FeatureVector>,
    pub segmentation: Segmentation,
    pub tasks: Vec<MetaTask>,
}

impl RegionData {
    /// Featurize + segment + group + build the eligible task pool.
    /// Segmentation is seed-free, so one preparation serves all repeats.
    pub fn prepare(
        name: &str,
        stack: RasterStack,
        points: &[SamplePoint],
        config: &ExperimentConfig,
    ) -> Result<RegionData> {
        let mut samples = Vec::new();
        for p in points {
            if p.label.is_none() {
                continue;
            }
            samples.push(stack.featurize_point(p)?);
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("region '{name}' has no labeled samples")));
        }
        let mut segmentation = segment(&stack, &config.slic)?;
        group_samples(&mut segmentation, &mut samples);
        let (tasks, _) = build_tasks(&segmentation.blocks, &samples, config.min_per_class)?;
        let tasks: Vec<MetaTask> = tasks
            .into_iter()
            .filter(|t| t.n_k >= config.min_task_samples)
            .collect();
        if tasks.is_empty() {
            return Err(Error::Data(format!(
                "region '{name}' has no task with >= {} samples",
                config.min_task_samples
            )));
        }
        Ok(RegionData {
            name: name.to_string(),
            stack,
            samples,
            segmentation,
            tasks,
        })
    }
}

/// Outcome of one run: pooled query metrics after per-task adaptation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub oa: f64,
    pub confusion: ConfusionCounts,
    pub metrics: Metrics,
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub train_tasks: usize,
    pub test_tasks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub stats: RunStatistics,
    pub per_run: Vec<RunRecord>,
}

/// (region index, task) pairs for one run's train/test pools.
struct RunSplit {
    train: Vec<(usize, MetaTask)>,
    test: Vec<(usize, MetaTask)>,
    /// Regions contributing training tasks, for the pretraining data.
    train_regions: Vec<usize>,
}

fn mode_split(
    regions: &[RegionData],
    config: &ExperimentConfig,
    run_seed: u64,
) -> Result<RunSplit> {
    let need = config.mode.regions_needed();
    if regions.len() < need {
        return Err(Error::Config(format!(
            "experiment mode {:?} needs {need} region(s), got {}",
            config.mode,
            regions.len()
        )));
    }
    let split_of = |region: usize| -> Result<(Vec<MetaTask>, Vec<MetaTask>)> {
        let d = split_tasks(
            regions[region].tasks.clone(),
            config.train_fraction,
            derive_seed(run_seed, "task-split", region as u64),
        )?;
        Ok((d.train_tasks, d.test_tasks))
    };
    let all_of = |region: usize| regions[region].tasks.clone();
    let tag = |region: usize, tasks: Vec<MetaTask>| -> Vec<(usize, MetaTask)> {
        tasks.into_iter().map(|t| (region, t)).collect()
    };

    let (train, test, train_regions) = match config.mode {
        ExperimentMode::A => {
            let (tr, te) = split_of(0)?;
            (tag(0, tr), tag(0, te), vec![0])
        }
        ExperimentMode::B => (tag(0, all_of(0)), tag(1, all_of(1)), vec![0]),
        ExperimentMode::C => {
            let (tr0, te0) = split_of(0)?;
            let (tr1, _) = split_of(1)?;
            let mut train = tag(0, tr0);
            train.extend(tag(1, tr1));
            (train, tag(0, te0), vec![0, 1])
        }
        ExperimentMode::D => {
            let (tr1, te1) = split_of(1)?;
            let mut train = tag(0, all_of(0));
            train.extend(tag(1, tr1));
            (train, tag(1, te1), vec![0, 1])
        }
    };
    Ok(RunSplit {
        train,
        test,
        train_regions,
    })
}

fn materialize(
    regions: &[RegionData],
    tagged: &mut [(usize, MetaTask)],
    k_shot: KShot,
    run_seed: u64,
    stream: &str,
) -> Result<Vec<TaskData>> {
    tagged
        .iter_mut()
        .enumerate()
        .map(|(i, (region, task))| {
            split_support_query(
                task,
                &regions[*region].samples,
                k_shot,
                derive_seed(run_seed, stream, i as u64),
            )?;
            task_data(task, &regions[*region].samples)
        })
        .collect()
}

fn evaluate_adapted(
    model_for_task: impl Fn(&TaskData) -> Result<MlpParams>,
    test: &[TaskData],
    threshold: f64,
) -> Result<(ConfusionCounts, Vec<f64>, Vec<u8>)> {
    let mut confusion = ConfusionCounts::zero();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for task in test {
        let adapted = model_for_task(task)?;
        for i in 0..task.query.len() {
            let row: Vec<f64> = (0..task.query.x.cols)
                .map(|c| task.query.x.at(i, c))
                .collect();
            let p = forward(&adapted, &row)?;
            let y = task.query.y.data[i] as u8;
            confusion.add(p, y, threshold);
            scores.push(p);
            labels.push(y);
        }
    }
    Ok((confusion, scores, labels))
}

fn run_once(
    regions: &[RegionData],
    config: &ExperimentConfig,
    master_seed: u64,
    run: usize,
) -> Result<RunRecord> {
    let run_seed = derive_seed(master_seed, "run", run as u64);
    let mut split = mode_split(regions, config, run_seed)?;
    let train = materialize(regions, &mut split.train, config.k_shot, run_seed, "sq-train")?;
    let test = materialize(regions, &mut split.test, config.k_shot, run_seed, "sq-test")?;
    let n_total: usize = train.iter().map(|t| t.n_k).sum();

    // Pretraining consumes the training regions' sample vectors, unlabeled.
    let pretrain_data: Vec<Vec<f64>> = split
        .train_regions
        .iter()
        .flat_map(|&r| regions[r].samples.iter().map(|fv| fv.values.clone()))
        .collect();
    let (_, f0) = greedy_pretrain(
        &pretrain_data,
        &config.pretrain,
        derive_seed(run_seed, "pretrain", 0),
    )?;

    let meta_config = MetaConfig {
        seed: derive_seed(run_seed, "meta", 0),
        ..config.meta
    };
    let intermediate = meta_train(&f0, &train, n_total, &meta_config)?;

    let (confusion, scores, labels) = evaluate_adapted(
        |task| {
            few_shot_adapt(
                &intermediate.params,
                &task.support,
                config.meta.alpha,
                config.meta.inner_steps,
            )
        },
        &test,
        config.threshold,
    )?;
    let m = metrics(&confusion);
    let (roc, auc) = match roc_auc(&scores, &labels) {
        Ok((points, a)) => (points, Some(a)),
        Err(_) => (Vec::new(), None),
    };
    Ok(RunRecord {
        run,
        seed: run_seed,
        oa: m.accuracy.unwrap_or(0.0),
        confusion,
        metrics: m,
        auc,
        roc,
        train_tasks: train.len(),
        test_tasks: test.len(),
    })
}

/// Repeated runs with derived seeds; aggregation is over the ordered run
/// list, so parallel execution cannot change the result.
pub fn run_experiment(
    regions: &[RegionData],
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let per_run: Vec<RunRecord> = (0..config.repeats)
        .into_par_iter()
        .map(|run| run_once(regions, config, master_seed, run))
        .collect::<Result<_>>()?;
    let stats = RunStatistics::from_runs(per_run.iter().map(|r| r.oa).collect())?;
    Ok(ExperimentOutcome { stats, per_run })
}

/// The control arm: one conventionally trained MLP (same architecture,
/// random init) fitted to the pooled training samples, then fine-tuned
/// per test task with the same few-shot budget.
pub fn run_global_baseline(
    regions: &[RegionData],
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let per_run: Vec<RunRecord> = (0..config.repeats)
        .into_par_iter()
        .map(|run| baseline_once(regions, config, master_seed, run))
        .collect::<Result<_>>()?;
    let stats = RunStatistics::from_runs(per_run.iter().map(|r| r.oa).collect())?;
    Ok(ExperimentOutcome { stats, per_run })
}

fn baseline_once(
    regions: &[RegionData],
    config: &ExperimentConfig,
    master_seed: u64,
    run: usize,
) -> Result<RunRecord> {
    // Same derived seeds as the meta arm, so both see identical splits.
    let run_seed = derive_seed(master_seed, "run", run as u64);
    let mut split = mode_split(regions, config, run_seed)?;
    let train = materialize(regions, &mut split.train, config.k_shot, run_seed, "sq-train")?;
    let test = materialize(regions, &mut split.test, config.k_shot, run_seed, "sq-test")?;

    // Pool every training sample (support and query alike).
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for t in &train {
        for batch in [&t.support, &t.query] {
            for i in 0..batch.len() {
                let row: Vec<f64> = (0..batch.x.cols).map(|c| batch.x.at(i, c)).collect();
                rows.push((row, batch.y.data[i]));
            }
        }
    }
    let refs: Vec<(&[f64], f64)> = rows.iter().map(|(f, y)| (f.as_slice(), *y)).collect();
    let pooled = crate::math::Batch::from_rows(&refs)?;

    let dim = regions[0].stack.band_count();
    let dims = vec![
        dim,
        config.pretrain.h1,
        config.pretrain.h2,
        config.pretrain.h3,
        1,
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(run_seed, "baseline", 0));
    use rand::SeedableRng;
    let mut model = MlpParams::random(&dims, &mut rng)?;
    let mut adam = AdamState::new(model.param_count());
    for _ in 0..config.baseline_epochs {
        let (_, g) = crate::math::grad(&model, &pooled)?;
        let mut flat = model.flatten();
        adam.step(&mut flat, &g.flatten(), 1e-3)?;
        model.unflatten_into(&flat)?;
    }

    let (confusion, scores, labels) = evaluate_adapted(
        |task| {
            few_shot_adapt(
                &model,
                &task.support,
                config.meta.alpha,
                config.meta.inner_steps,
            )
        },
        &test,
        config.threshold,
    )?;
    let m = metrics(&confusion);
    let (roc, auc) = match roc_auc(&scores, &labels) {
        Ok((points, a)) => (points, Some(a)),
        Err(_) => (Vec::new(), None),
    };
    Ok(RunRecord {
        run,
        seed: run_seed,
        oa: m.accuracy.unwrap_or(0.0),
        confusion,
        metrics: m,
        auc,
        roc,
        train_tasks: train.len(),
        test_tasks: test.len(),
    })
}

/// Adapts every test task against indices resolved from a prepared
/// region, used by the prediction path. Blocks without a task fall back
/// to the unadapted model.
pub fn adapt_block_models(
    region: &RegionData,
    intermediate: &MlpParams,
    k_shot: KShot,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<std::collections::BTreeMap<usize, MlpParams>> {
    let mut models = std::collections::BTreeMap::new();
    for (i, task) in region.tasks.iter().enumerate() {
        let mut task = task.clone();
        // adapt on the support draw; remaining samples stay out as the
        // task's query
        split_support_query(
            &mut task,
            &region.samples,
            k_shot,
            derive_seed(seed, "adapt", i as u64),
        )?;
        let support = batch_from_indices(&region.samples, &task.support)?;
        let adapted = few_shot_adapt(intermediate, &support, alpha, steps)?;
        models.insert(task.task_id, adapted);
    }
    Ok(models)
}
