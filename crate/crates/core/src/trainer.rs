//! Losses for finetune, ER and ER-FSL, and the online training loop.
//!
//! Per mini-batch: draw a replay batch, evaluate the method's loss,
//! backpropagate, take one SGD step, then offer the current batch to the
//! reservoir. Before a task's first batch ER-FSL fixes that task's learning
//! subspace `S` and grows the accumulated space `A`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::buffer::ReplayBuffer;
use crate::data::{stream_batches, Batch, TaskData};
use crate::error::{LabError, Result};
use crate::eval::{evaluate_many, AccuracyMatrix};
use crate::matrix::Matrix;
use crate::nn::{batch_loss, GradientBundle, ModelBundle};
use crate::par::Execution;
use crate::seed::derive_seed;
use crate::subspace::{accumulate, blank_subspace, reuse_subspace, AccumulatedMask, FeatureMask, SubspaceMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Er,
    #[serde(rename = "erfsl")]
    ErFsl,
}

/// ER-FSL ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Every task learns in task 1's subspace; `A` still grows on schedule.
    FixedS,
    /// Learn in `A`, replay in `S`.
    InvertedSpaces,
    /// `L_c + L_b` instead of the γ-weighted mix.
    Unweighted,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::ErFsl => "erfsl",
        })
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "er" => Ok(Method::Er),
            "erfsl" => Ok(Method::ErFsl),
            other => Err(LabError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub ablation: Ablation,
    pub gamma: f64,
    pub lr: f64,
    pub current_batch: usize,
    pub replay_batch: usize,
    pub buffer_capacity: usize,
    pub subspace_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, subspace_size: usize) -> Self {
        Self {
            method,
            ablation: Ablation::None,
            gamma: 0.5,
            lr: 0.1,
            current_batch: 10,
            replay_batch: 10,
            buffer_capacity: 500,
            subspace_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LabError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.current_batch == 0 || self.replay_batch == 0 {
            return Err(LabError::Config("batch sizes must be at least 1".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(LabError::Config("buffer capacity must be at least 1".into()));
        }
        if self.method == Method::ErFsl && self.subspace_size == 0 {
            return Err(LabError::Config("subspace size must be at least 1".into()));
        }
        if self.method != Method::ErFsl && self.ablation != Ablation::None {
            return Err(LabError::Config("ablations apply to erfsl only".into()));
        }
        Ok(())
    }
}

/// Loss value with its parts and gradient.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// Loss on current samples (`L_c` for ER-FSL).
    pub current: f64,
    /// Loss on replayed samples (`L_b`); zero when nothing was replayed.
    pub replay: f64,
    pub grads: GradientBundle,
}

/// Full-space cross-entropy over `seen_classes`, current samples only.
pub fn loss_finetune(model: &ModelBundle, batch: &Batch, seen_classes: &[usize]) -> Result<LossOutput> {
    let out = batch_loss(
        model,
        &batch.x,
        &batch.labels,
        &FeatureMask::ones(model.feature_dim()),
        seen_classes,
    )?;
    Ok(LossOutput {
        total: out.loss,
        current: out.loss,
        replay: 0.0,
        grads: out.grads,
    })
}

/// Full-space cross-entropy averaged over the union of both batches.
pub fn loss_er(model: &ModelBundle, current: &Batch, replay: &Batch, seen_classes: &[usize]) -> Result<LossOutput> {
    if current.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    if replay.is_empty() {
        return loss_finetune(model, current, seen_classes);
    }
    let mut data = current.x.as_slice().to_vec();
    data.extend_from_slice(replay.x.as_slice());
    let x = Matrix::from_vec(current.len() + replay.len(), current.x.cols(), data)?;
    let labels: Vec<usize> = current.labels.iter().chain(&replay.labels).copied().collect();
    let out = batch_loss(
        model,
        &x,
        &labels,
        &FeatureMask::ones(model.feature_dim()),
        seen_classes,
    )?;
    // per-part losses are for logging only
    let per_sample = per_sample_losses(&out.probs, &labels, seen_classes);
    let (cur, rep) = per_sample.split_at(current.len());
    Ok(LossOutput {
        total: out.loss,
        current: cur.iter().sum::<f64>() / cur.len() as f64,
        replay: rep.iter().sum::<f64>() / rep.len() as f64,
        grads: out.grads,
    })
}

fn per_sample_losses(probs: &Matrix, labels: &[usize], class_set: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(s, y)| {
            let j = class_set.iter().position(|c| c == y).expect("validated by the loss");
            -probs[(s, j)].ln()
        })
        .collect()
}

/// `(1−γ)·L_c + γ·L_b`: current samples in subspace `S`, replayed samples in
/// the accumulated space `A`, both normalised over `seen_classes`.
pub fn loss_er_fsl(
    model: &ModelBundle,
    current: &Batch,
    replay: &Batch,
    subspace: &FeatureMask,
    accumulated: &FeatureMask,
    gamma: f64,
    seen_classes: &[usize],
) -> Result<LossOutput> {
    if !subspace.is_subset_of(accumulated) {
        return Err(LabError::Config(
            "learning subspace must lie inside the accumulated space".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(LabError::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    split_space_loss(
        model,
        current,
        replay,
        subspace,
        accumulated,
        (1.0 - gamma, gamma),
        seen_classes,
    )
}

/// Weighted sum of a masked current-batch loss and a masked replay loss. An
/// empty replay batch contributes nothing.
pub fn split_space_loss(
    model: &ModelBundle,
    current: &Batch,
    replay: &Batch,
    learn_mask: &FeatureMask,
    replay_mask: &FeatureMask,
    (current_weight, replay_weight): (f64, f64),
    seen_classes: &[usize],
) -> Result<LossOutput> {
    if current.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    let lc = batch_loss(model, &current.x, &current.labels, learn_mask, seen_classes)?;
    let mut grads = lc.grads.scaled(current_weight);
    let mut replay_loss = 0.0;
    if !replay.is_empty() {
        let lb = batch_loss(model, &replay.x, &replay.labels, replay_mask, seen_classes)?;
        grads.add_scaled(&lb.grads, replay_weight)?;
        replay_loss = lb.loss;
    }
    Ok(LossOutput {
        total: current_weight * lc.loss + replay_weight * replay_loss,
        current: lc.loss,
        replay: replay_loss,
        grads,
    })
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task: usize,
    pub loss_current: f64,
    pub loss_replay: f64,
    pub loss_total: f64,
    pub buffer_fill: usize,
    /// Learning mask as a bit string.
    pub mask_id: String,
}

/// Model, memory and mask state carried across tasks.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: ModelBundle,
    pub buffer: ReplayBuffer,
    /// Learning mask used for each task so far.
    pub subspaces: Vec<SubspaceMask>,
    pub accumulated: AccumulatedMask,
    pub seen_classes: Vec<usize>,
    pub current_task: usize,
    pub step: u64,
}

impl TrainerState {
    pub fn new(model: ModelBundle, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let buffer = ReplayBuffer::new(
            config.buffer_capacity,
            model.extractor.input_dim(),
            derive_seed(config.seed, "buffer", 0),
        )?;
        let dim = model.feature_dim();
        if config.method == Method::ErFsl && config.subspace_size > dim {
            return Err(LabError::Config(format!(
                "subspace size {} exceeds feature dim {dim}",
                config.subspace_size
            )));
        }
        let accumulated = match config.method {
            Method::ErFsl => AccumulatedMask::empty(dim),
            _ => AccumulatedMask::full(dim),
        };
        Ok(Self {
            model,
            buffer,
            subspaces: Vec::new(),
            accumulated,
            seen_classes: Vec::new(),
            current_task: 0,
            step: 0,
        })
    }

    /// Mask used for prediction after the tasks seen so far.
    pub fn prediction_mask(&self) -> &FeatureMask {
        &self.accumulated.mask
    }

    /// Subspace the normal ER-FSL schedule hands to the next task: blank if
    /// one is left, otherwise the lowest-variance classifier dimensions over
    /// the classes seen before this task.
    fn scheduled_subspace(&self, task: usize, size: usize) -> Result<SubspaceMask> {
        let dim = self.model.feature_dim();
        if task * size <= dim {
            blank_subspace(task, size, dim)
        } else {
            reuse_subspace(task, &self.model.classifier.weights, size, &self.seen_classes)
        }
    }

    fn assign_masks(&mut self, task: usize, config: &TrainConfig) -> Result<FeatureMask> {
        let dim = self.model.feature_dim();
        if config.method != Method::ErFsl {
            let full = SubspaceMask {
                task,
                origin: crate::subspace::SubspaceOrigin::Blank,
                mask: FeatureMask::ones(dim),
            };
            self.subspaces.push(full);
            return Ok(FeatureMask::ones(dim));
        }
        let scheduled = self.scheduled_subspace(task, config.subspace_size)?;
        self.accumulated = accumulate(&self.accumulated, &scheduled)?;
        let learn = match (config.ablation, self.subspaces.first()) {
            (Ablation::FixedS, Some(first)) => SubspaceMask { task, ..first.clone() },
            _ => scheduled,
        };
        let mask = learn.mask.clone();
        self.subspaces.push(learn);
        Ok(mask)
    }

    /// Trains one task in a single pass. `on_step` receives every step record.
    pub fn train_task(
        &mut self,
        task: &TaskData,
        config: &TrainConfig,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        self.train_task_inspect(task, config, |r, _, _| on_step(r))
    }

    /// [`train_task`](Self::train_task), also handing each step's gradients
    /// (before the update) and the accumulated mask to `inspect`.
    pub fn train_task_inspect(
        &mut self,
        task: &TaskData,
        config: &TrainConfig,
        mut inspect: impl FnMut(&StepRecord, &GradientBundle, &FeatureMask),
    ) -> Result<()> {
        if task.id != self.current_task + 1 {
            return Err(LabError::Config(format!(
                "expected task {}, got task {}",
                self.current_task + 1,
                task.id
            )));
        }
        if task.is_empty() {
            return Err(LabError::Empty("task"));
        }
        let learn_mask = self.assign_masks(task.id, config)?;
        for &c in &task.classes {
            if !self.seen_classes.contains(&c) {
                self.seen_classes.push(c);
            }
        }
        let mask_id = learn_mask.to_string();
        let stream = stream_batches(
            task,
            config.current_batch,
            derive_seed(config.seed, "batches", task.id as u64),
        )?;
        for batch in stream {
            let replay = match config.method {
                Method::Finetune => Batch {
                    x: Matrix::zeros(0, batch.x.cols()),
                    labels: Vec::new(),
                    ids: Vec::new(),
                },
                _ => self.buffer.retrieve(config.replay_batch),
            };
            let out = self.method_loss(&batch, &replay, &learn_mask, config)?;
            if !out.total.is_finite() {
                return Err(LabError::NonFinite { tensor: "loss".into() });
            }
            self.model.sgd_step(&out.grads, config.lr)?;
            self.buffer.update(&batch)?;
            self.step += 1;
            let record = StepRecord {
                step: self.step,
                task: task.id,
                loss_current: out.current,
                loss_replay: out.replay,
                loss_total: out.total,
                buffer_fill: self.buffer.len(),
                mask_id: mask_id.clone(),
            };
            inspect(&record, &out.grads, &self.accumulated.mask);
        }
        self.current_task = task.id;
        Ok(())
    }

    fn method_loss(
        &self,
        batch: &Batch,
        replay: &Batch,
        learn_mask: &FeatureMask,
        config: &TrainConfig,
    ) -> Result<LossOutput> {
        let seen = &self.seen_classes;
        match config.method {
            Method::Finetune => loss_finetune(&self.model, batch, seen),
            Method::Er => loss_er(&self.model, batch, replay, seen),
            Method::ErFsl => {
                let acc = &self.accumulated.mask;
                let g = config.gamma;
                match config.ablation {
                    Ablation::None | Ablation::FixedS => {
                        split_space_loss(&self.model, batch, replay, learn_mask, acc, (1.0 - g, g), seen)
                    }
                    Ablation::InvertedSpaces => {
                        split_space_loss(&self.model, batch, replay, acc, learn_mask, (1.0 - g, g), seen)
                    }
                    Ablation::Unweighted => {
                        split_space_loss(&self.model, batch, replay, learn_mask, acc, (1.0, 1.0), seen)
                    }
                }
            }
        }
    }

    /// `a[i][j]` for every task `j` trained so far.
    pub fn evaluate_seen(&self, test_sets: &[TaskData], exec: Execution) -> Result<Vec<f64>> {
        let sets: Vec<(&Matrix, &[usize])> = test_sets[..self.current_task]
            .iter()
            .map(|t| (&t.samples, t.labels.as_slice()))
            .collect();
        evaluate_many(&self.model, &self.accumulated.mask, &sets, &self.seen_classes, exec)
    }
}

/// Result of a full pass over a task sequence.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub matrix: AccuracyMatrix,
    pub steps: Vec<StepRecord>,
    pub state: TrainerState,
}

/// Trains every task in order, evaluating all seen tasks after each one.
pub fn run_experiment(
    config: &TrainConfig,
    model: ModelBundle,
    tasks: &[TaskData],
    test_sets: &[TaskData],
    exec: Execution,
) -> Result<ExperimentOutcome> {
    if tasks.len() != test_sets.len() {
        return Err(LabError::Dimension {
            context: "test set count",
            expected: tasks.len(),
            actual: test_sets.len(),
        });
    }
    for (train, test) in tasks.iter().zip(test_sets) {
        if train.classes != test.classes {
            return Err(LabError::Config(format!(
                "test set {} is not aligned with its task",
                test.id
            )));
        }
    }
    let mut state = TrainerState::new(model, config)?;
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut steps = Vec::new();
    for task in tasks {
        state.train_task(task, config, |r| steps.push(r.clone()))?;
        matrix.push_row(state.evaluate_seen(test_sets, exec)?)?;
    }
    Ok(ExperimentOutcome { matrix, steps, state })
}
