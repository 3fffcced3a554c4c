//! Prediction in the accumulated space, accuracy bookkeeping, and the
//! per-dimension logit decomposition used to diagnose forgetting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::{dot, Matrix};
use crate::nn::ModelBundle;
use crate::par::Execution;
use crate::subspace::FeatureMask;

/// Argmax over `seen_classes` of `(w_c ⊙ a) · (z ⊙ a)`; ties go to the lower
/// class id.
pub fn predict_features(
    model: &ModelBundle,
    features: &[f64],
    accumulated: &FeatureMask,
    seen_classes: &[usize],
) -> Result<usize> {
    let za = accumulated.apply(features)?;
    let mut best: Option<(usize, f64)> = None;
    for &c in seen_classes {
        let logit = dot(&accumulated.apply(model.classifier.prototype(c))?, &za);
        best = match best {
            Some((bc, bl)) if bl > logit || (bl == logit && bc < c) => Some((bc, bl)),
            _ => Some((c, logit)),
        };
    }
    best.map(|(c, _)| c).ok_or(LabError::Empty("seen class set"))
}

pub fn predict(model: &ModelBundle, x: &[f64], accumulated: &FeatureMask, seen_classes: &[usize]) -> Result<usize> {
    let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let z = model.extractor.forward(&row)?;
    predict_features(model, z.row(0), accumulated, seen_classes)
}

/// Fraction of `samples` whose prediction matches `labels`.
pub fn evaluate(
    model: &ModelBundle,
    accumulated: &FeatureMask,
    samples: &Matrix,
    labels: &[usize],
    seen_classes: &[usize],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(LabError::Empty("test set"));
    }
    let z = model.extractor.forward(samples)?;
    let mut correct = 0usize;
    for (row, &y) in z.row_iter().zip(labels) {
        if predict_features(model, row, accumulated, seen_classes)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Evaluates several test sets against the same read-only model.
pub fn evaluate_many(
    model: &ModelBundle,
    accumulated: &FeatureMask,
    sets: &[(&Matrix, &[usize])],
    seen_classes: &[usize],
    exec: Execution,
) -> Result<Vec<f64>> {
    exec.map(sets, |(x, y)| evaluate(model, accumulated, x, y, seen_classes))
        .into_iter()
        .collect()
}

/// Lower-triangular `a[i][j]`, accuracy on task `j` after training task `i`
/// (both 1-based in the accessors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from complete rows (row `i` has `i` entries).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn task_count(&self) -> usize {
        self.tasks
    }

    pub fn completed_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    /// Appends the evaluation made after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len() + 1;
        if i > self.tasks {
            return Err(LabError::Config(format!("matrix already holds {} rows", self.tasks)));
        }
        if row.len() != i {
            return Err(LabError::Dimension {
                context: "accuracy row length",
                expected: i,
                actual: row.len(),
            });
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LabError::Config(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        if i == 0 {
            return Err(LabError::IncompleteRow { row: 0 });
        }
        self.rows
            .get(i - 1)
            .map(Vec::as_slice)
            .ok_or(LabError::IncompleteRow { row: i })
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i.checked_sub(1)?)?.get(j.checked_sub(1)?).copied()
    }

    /// `A_i`, the mean of row `i`.
    pub fn average_accuracy(&self, i: usize) -> Result<f64> {
        let row = self.row(i)?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// `A_T`.
    pub fn final_accuracy(&self) -> Result<f64> {
        if !self.is_complete() {
            return Err(LabError::IncompleteRow {
                row: self.rows.len() + 1,
            });
        }
        self.average_accuracy(self.tasks)
    }

    /// Mean over earlier tasks of best-before-final minus final accuracy.
    pub fn final_forgetting(&self) -> Result<f64> {
        if self.tasks < 2 {
            return Err(LabError::UndefinedMetric("forgetting needs at least 2 tasks"));
        }
        if !self.is_complete() {
            return Err(LabError::IncompleteRow {
                row: self.rows.len() + 1,
            });
        }
        let t = self.tasks;
        let last = &self.rows[t - 1];
        let total: f64 = (0..t - 1)
            .map(|j| {
                let peak = (j..t - 1).map(|i| self.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
                peak - last[j]
            })
            .sum();
        Ok(total / (t - 1) as f64)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

pub fn average_accuracy(matrix: &AccuracyMatrix, i: usize) -> Result<f64> {
    matrix.average_accuracy(i)
}

pub fn final_forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.final_forgetting()
}

/// Mean per-dimension products `w_i^c · z_i` over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerProductProfile {
    /// One row per class in `old_classes ++ new_classes`.
    pub classes: Vec<usize>,
    pub per_class: Matrix,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    /// Per-dimension mean over the old-class prototypes.
    pub old: Vec<f64>,
    /// Per-dimension mean over the new-class prototypes.
    pub new: Vec<f64>,
    pub old_mean: f64,
    pub new_mean: f64,
}

impl InnerProductProfile {
    /// Sum of class `c`'s per-dimension terms, i.e. its mean logit.
    pub fn class_total(&self, class: usize) -> Option<f64> {
        let r = self.classes.iter().position(|&c| c == class)?;
        Some(self.per_class.row(r).iter().sum())
    }

    /// CSV with columns `dim,group,mean_value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dim", "group", "mean_value"])?;
        for (group, values) in [("old", &self.old), ("new", &self.new)] {
            for (i, v) in values.iter().enumerate() {
                out.write_record([i.to_string(), group.to_string(), format!("{v:e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn decomposed_inner_product(
    model: &ModelBundle,
    samples: &Matrix,
    accumulated: &FeatureMask,
    old_classes: &[usize],
    new_classes: &[usize],
) -> Result<InnerProductProfile> {
    if samples.rows() == 0 {
        return Err(LabError::Empty("sample set"));
    }
    if old_classes.iter().any(|c| new_classes.contains(c)) {
        return Err(LabError::Config("old and new class groups overlap".into()));
    }
    let d = model.feature_dim();
    let z = accumulated.apply_columns(&model.extractor.forward(samples)?)?;
    let n = samples.rows() as f64;
    let mut mean_z = vec![0.0; d];
    for row in z.row_iter() {
        for (m, &v) in mean_z.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let classes: Vec<usize> = old_classes.iter().chain(new_classes).copied().collect();
    let mut per_class = Matrix::zeros(classes.len(), d);
    for (r, &c) in classes.iter().enumerate() {
        if c >= model.class_count() {
            return Err(LabError::InvalidLabel { label: c });
        }
        let w = accumulated.apply(model.classifier.prototype(c))?;
        for ((out, &wi), &zi) in per_class.row_mut(r).iter_mut().zip(&w).zip(&mean_z) {
            *out = wi * zi;
        }
    }
    let group = |range: std::ops::Range<usize>| -> Vec<f64> {
        let k = range.len();
        (0..d)
            .map(|i| {
                if k == 0 {
                    0.0
                } else {
                    range.clone().map(|r| per_class[(r, i)]).sum::<f64>() / k as f64
                }
            })
            .collect()
    };
    let old = group(0..old_classes.len());
    let new = group(old_classes.len()..classes.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / d as f64;
    Ok(InnerProductProfile {
        old_mean: mean(&old),
        new_mean: mean(&new),
        classes,
        per_class,
        old_classes: old_classes.to_vec(),
        new_classes: new_classes.to_vec(),
        old,
        new,
    })
}
