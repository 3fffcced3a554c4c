//! The method × seed grid: loads data, runs every combination, and writes
//! the result files.
//!
//! Within one seed, every method sees the same dataset, class order and
//! initial weights. Batch order and buffer randomness are derived from the
//! seed and the method id.

mod config;
mod report;

pub use config::{
    parse_config, DataSection, ExperimentConfig, ExperimentSection, MethodId, ModelSection, TrainOverrides,
    TrainSection,
};
pub use report::{
    load_snapshot, write_outputs, MethodSummary, ModelSnapshot, RunSummary, Summary, MODEL_SNAPSHOT_FORMAT,
};

use std::time::Instant;

use crate::buffer::ReplayBuffer;
use crate::data::{load_csv, load_idx, split_tasks, synth_gaussian, ClassMap, GaussianSpec, LabeledDataset};
use crate::error::{LabError, Result};
use crate::eval::{decomposed_inner_product, AccuracyMatrix, InnerProductProfile};
use crate::nn::{ModelBundle, ModelShape};
use crate::par::Execution;
use crate::seed::derive_seed;
use crate::subspace::FeatureMask;
use crate::trainer::{run_experiment, StepRecord, TrainerState};

/// Environment variable bounding the number of concurrent runs.
pub const THREADS_ENV: &str = "OCL_LAB_THREADS";

/// `OCL_LAB_THREADS` as a positive integer, if set and valid.
pub fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("{THREADS_ENV}={raw:?} is not a positive integer; ignoring it");
            None
        }
    }
}

/// Train and test splits shared by every run.
#[derive(Debug, Clone)]
pub struct Workload {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_workload(data: &DataSection) -> Result<Workload> {
    let (mut train, mut test) = match data {
        DataSection::Synth {
            classes,
            input_dim,
            per_class,
            separation,
            seed,
            test_fraction,
        } => {
            let seed = *seed;
            let full = synth_gaussian(&GaussianSpec {
                class_count: *classes,
                input_dim: *input_dim,
                per_class: *per_class,
                separation: *separation,
                seed,
            })?;
            full.split_holdout(*test_fraction, derive_seed(seed, "holdout", 0))?
        }
        DataSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        ),
        DataSection::Csv { train, test, classes } => (load_csv(train, *classes)?, load_csv(test, *classes)?),
    };
    if train.input_dim() != test.input_dim() {
        return Err(LabError::Dimension {
            context: "test input width",
            expected: train.input_dim(),
            actual: test.input_dim(),
        });
    }
    let classes = train.class_count.max(test.class_count);
    train.class_count = classes;
    test.class_count = classes;
    Ok(Workload { train, test })
}

/// Everything one (method, seed) run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: MethodId,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub final_accuracy: f64,
    /// Undefined for a single task.
    pub final_forgetting: Option<f64>,
    pub seconds: f64,
    pub steps: Vec<StepRecord>,
    pub class_map: ClassMap,
    pub state: TrainerState,
    /// Logit decomposition over buffered old-class samples, when requested.
    pub profile: Option<InnerProductProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub method: MethodId,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

impl RunReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn runs_of(&self, method: MethodId) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.method == method)
    }

    pub fn summary(&self) -> Summary {
        Summary::from_report(self)
    }
}

/// Trains one method under one seed.
pub fn run_single(config: &ExperimentConfig, work: &Workload, method: MethodId, seed: u64) -> Result<RunResult> {
    let started = Instant::now();
    let tasks = config.experiment.tasks;
    let seq = split_tasks(&work.train, tasks, derive_seed(seed, "classes", 0))?;
    let test_sets = seq.class_map.partition(&work.test)?;
    let shape = ModelShape {
        input_dim: work.train.input_dim(),
        hidden: config.model.hidden.clone(),
        feature_dim: config.model.feature_dim,
        classes: work.train.class_count,
    };
    let model = ModelBundle::init(&shape, derive_seed(seed, "init", 0));
    let train_cfg = config.train_config(method, derive_seed(seed, method.name(), 0));
    let outcome = run_experiment(&train_cfg, model, &seq.tasks, &test_sets, Execution::Sequential)?;
    let final_accuracy = outcome.matrix.final_accuracy()?;
    let final_forgetting = if tasks > 1 {
        Some(outcome.matrix.final_forgetting()?)
    } else {
        None
    };
    let profile = if config.experiment.profile && tasks > 1 {
        buffered_profile(&outcome.state, &seq.class_map)?
    } else {
        None
    };
    Ok(RunResult {
        method,
        seed,
        matrix: outcome.matrix,
        final_accuracy,
        final_forgetting,
        seconds: started.elapsed().as_secs_f64(),
        steps: outcome.steps,
        class_map: seq.class_map,
        state: outcome.state,
        profile,
    })
}

/// Decomposes logits over the buffered samples of all but the last task's
/// classes, comparing old-class and last-task prototypes. `None` when the
/// buffer holds no old-class sample.
pub fn buffered_profile(state: &TrainerState, class_map: &ClassMap) -> Result<Option<InnerProductProfile>> {
    profile_parts(
        &state.model,
        state.prediction_mask(),
        &state.buffer,
        class_map,
        state.current_task,
    )
}

/// [`buffered_profile`] for a saved model and buffer.
pub fn snapshot_profile(snapshot: &ModelSnapshot, buffer: &ReplayBuffer) -> Result<Option<InnerProductProfile>> {
    profile_parts(
        &snapshot.model,
        &snapshot.prediction_mask,
        buffer,
        &snapshot.class_map,
        snapshot.tasks_trained,
    )
}

fn profile_parts(
    model: &ModelBundle,
    mask: &FeatureMask,
    buffer: &ReplayBuffer,
    class_map: &ClassMap,
    last: usize,
) -> Result<Option<InnerProductProfile>> {
    if last < 2 {
        return Ok(None);
    }
    let old = class_map.seen_through(last - 1);
    let new = class_map.task_classes(last);
    let contents = buffer.contents();
    let rows: Vec<usize> = (0..contents.len())
        .filter(|&i| old.contains(&contents.labels[i]))
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let samples = contents.x.select_rows(&rows);
    decomposed_inner_product(model, &samples, mask, old, new).map(Some)
}

/// Runs the whole grid. Individual failures are collected, not raised.
pub fn run_grid(config: &ExperimentConfig, exec: Execution, threads: Option<usize>) -> Result<RunReport> {
    let work = load_workload(&config.data)?;
    let jobs: Vec<(MethodId, u64)> = config
        .experiment
        .methods
        .iter()
        .flat_map(|&m| config.experiment.seeds.iter().map(move |&s| (m, s)))
        .collect();
    log::info!(
        "running {} runs ({} methods x {} seeds)",
        jobs.len(),
        config.experiment.methods.len(),
        config.experiment.seeds.len()
    );
    let outcomes = exec.with_threads(threads, || {
        exec.map(&jobs, |&(method, seed)| {
            let r = run_single(config, &work, method, seed);
            match &r {
                Ok(run) => log::info!(
                    "{method} seed {seed}: A_T {:.4} in {:.2}s",
                    run.final_accuracy,
                    run.seconds
                ),
                Err(e) => log::error!("{method} seed {seed} failed: {e}"),
            }
            r
        })
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((method, seed), outcome) in jobs.into_iter().zip(outcomes) {
        match outcome {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(RunFailure {
                method,
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(RunReport {
        config: config.clone(),
        runs,
        failures,
    })
}

/// Runs the grid and writes every result file under `out_dir`.
pub fn run(
    config: &ExperimentConfig,
    out_dir: &std::path::Path,
    exec: Execution,
    threads: Option<usize>,
) -> Result<RunReport> {
    let report = run_grid(config, exec, threads)?;
    write_outputs(&report, out_dir)?;
    Ok(report)
}
