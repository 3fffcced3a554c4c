use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Samples of one task. `sample_ids` index into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// 1-based task id.
    pub id: usize,
    pub classes: Vec<usize>,
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class-disjoint tasks carved from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
    pub class_map: ClassMap,
}

/// Shuffled class order; task `t` owns the `t`-th contiguous block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub order: Vec<usize>,
    pub classes_per_task: usize,
}

impl ClassMap {
    pub fn task_count(&self) -> usize {
        self.order.len() / self.classes_per_task
    }

    /// Classes of the 1-based task `task`.
    pub fn task_classes(&self, task: usize) -> &[usize] {
        &self.order[(task - 1) * self.classes_per_task..task * self.classes_per_task]
    }

    /// `C_{1:t}` in task order.
    pub fn seen_through(&self, task: usize) -> &[usize] {
        &self.order[..task * self.classes_per_task]
    }

    /// Partitions `dataset` the same way, e.g. to build aligned test sets.
    pub fn partition(&self, dataset: &LabeledDataset) -> Result<Vec<TaskData>> {
        let mut task_of = vec![usize::MAX; dataset.class_count];
        for (pos, &c) in self.order.iter().enumerate() {
            if c >= task_of.len() {
                return Err(LabError::InvalidLabel { label: c });
            }
            task_of[c] = pos / self.classes_per_task;
        }
        let mut ids = vec![Vec::new(); self.task_count()];
        for (i, &l) in dataset.labels.iter().enumerate() {
            match task_of.get(l) {
                Some(&t) if t != usize::MAX => ids[t].push(i),
                _ => return Err(LabError::InvalidLabel { label: l }),
            }
        }
        Ok(ids
            .into_iter()
            .enumerate()
            .map(|(t, sample_ids)| TaskData {
                id: t + 1,
                classes: self.task_classes(t + 1).to_vec(),
                samples: dataset.samples.select_rows(&sample_ids),
                labels: sample_ids.iter().map(|&i| dataset.labels[i]).collect(),
                sample_ids,
            })
            .collect())
    }
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Shuffles the classes with `shuffle_seed` and assigns them to `tasks`
/// contiguous blocks.
pub fn split_tasks(dataset: &LabeledDataset, tasks: usize, shuffle_seed: u64) -> Result<TaskSequence> {
    if tasks == 0 || !dataset.class_count.is_multiple_of(tasks) {
        return Err(LabError::Config(format!(
            "class count {} is not divisible into {tasks} tasks",
            dataset.class_count
        )));
    }
    let mut order: Vec<usize> = (0..dataset.class_count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let class_map = ClassMap {
        order,
        classes_per_task: dataset.class_count / tasks,
    };
    let tasks = class_map.partition(dataset)?;
    Ok(TaskSequence { tasks, class_map })
}

/// One mini-batch; `ids` index into the task's sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Single pass over a task in a seeded order.
pub struct BatchStream<'a> {
    task: &'a TaskData,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchStream<'_> {
    pub fn task_id(&self) -> usize {
        self.task.id
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(Batch {
            x: self.task.samples.select_rows(&ids),
            labels: ids.iter().map(|&i| self.task.labels[i]).collect(),
            ids,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchStream<'_> {}

pub fn stream_batches(task: &TaskData, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(LabError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchStream {
        task,
        order,
        batch_size,
        cursor: 0,
    })
}
