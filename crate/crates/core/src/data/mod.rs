//! Labeled datasets, task splitting and single-pass batch streams.

mod idx;
mod synth;
mod tasks;

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{synth_gaussian, GaussianSpec};
pub use tasks::{split_tasks, stream_batches, Batch, BatchStream, ClassMap, TaskData, TaskSequence};

/// Samples (one row each, values in `[0, 1]`) with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(LabError::Empty("dataset"));
        }
        if labels.len() != samples.rows() {
            return Err(LabError::CountMismatch {
                images: samples.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(LabError::InvalidLabel { label: bad });
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    /// Stratified holdout: from every class, `test_fraction` of its samples
    /// (at least one when the class has two or more) go to the second set.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(LabError::Config(format!(
                "test fraction {test_fraction} must lie in [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class in 0..self.class_count {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut rng);
            let mut n_test = (members.len() as f64 * test_fraction).round() as usize;
            if n_test == 0 && members.len() >= 2 && test_fraction > 0.0 {
                n_test = 1;
            }
            test_idx.extend_from_slice(&members[..n_test]);
            train_idx.extend_from_slice(&members[n_test..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((self.subset(&train_idx)?, self.subset(&test_idx)?))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }
}

/// Reads a headered CSV whose last column is the integer label. Feature
/// values are taken as-is and must already lie in `[0, 1]`.
pub fn load_csv(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(LabError::Format {
            offset: 0,
            message: "csv needs at least one feature column and a label column".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        if record.len() != width {
            return Err(LabError::Format {
                offset,
                message: format!("row {} has {} fields, expected {width}", row + 1, record.len()),
            });
        }
        for field in record.iter().take(width - 1) {
            let v: f64 = field.trim().parse().map_err(|_| LabError::Format {
                offset,
                message: format!("row {}: {field:?} is not a number", row + 1),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(LabError::Format {
                    offset,
                    message: format!("row {}: value {v} outside [0, 1]", row + 1),
                });
            }
            data.push(v);
        }
        let label_field = record.get(width - 1).unwrap_or_default().trim();
        let label: usize = label_field.parse().map_err(|_| LabError::Format {
            offset,
            message: format!("row {}: label {label_field:?} is not a non-negative integer", row + 1),
        })?;
        labels.push(label);
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let samples = Matrix::from_vec(labels.len(), width - 1, data)?;
    LabeledDataset::new(samples, labels, classes)
}
