//! Feature-dimension masks: per-task learning subspaces and the accumulated
//! replay/prediction space.
//!
//! Task `t` (1-based) with subspace size `k` normally receives the blank block
//! `[(t-1)k, tk)`. Once `t·k` exceeds the feature dimension there is no blank
//! block left and the subspace is rebuilt from the `k` classifier columns with
//! the smallest variance across seen classes. The accumulated mask is the union
//! of every subspace handed out so far.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Boolean selector over the `d` feature dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FeatureMask(Vec<bool>);

impl FeatureMask {
    pub fn ones(dim: usize) -> Self {
        Self(vec![true; dim])
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![false; dim])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Mask with bits `[start, end)` set.
    pub fn range(dim: usize, start: usize, end: usize) -> Self {
        Self((0..dim).map(|i| i >= start && i < end).collect())
    }

    pub fn from_indices(dim: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; dim];
        for &i in indices {
            bits[i] = true;
        }
        Self(bits)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn is_all(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn union(&self, other: &FeatureMask) -> Result<FeatureMask> {
        self.check_dim(other.dim())?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a | b).collect()))
    }

    pub fn is_subset_of(&self, other: &FeatureMask) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    /// 0.0/1.0 weights, convenient for multiplying into dense rows.
    pub fn weights(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(values.len())?;
        Ok(values
            .iter()
            .zip(&self.0)
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect())
    }

    /// Zeroes every column whose bit is false.
    pub fn apply_columns(&self, m: &Matrix) -> Result<Matrix> {
        self.check_dim(m.cols())?;
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&self.0) {
                if !b {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.dim() {
            return Err(LabError::Dimension {
                context: "feature mask length",
                expected: self.dim(),
                actual,
            });
        }
        Ok(())
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for FeatureMask {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(LabError::Config(format!("invalid mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl From<FeatureMask> for String {
    fn from(m: FeatureMask) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for FeatureMask {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// How a task's subspace was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceOrigin {
    Blank,
    Reused,
}

/// Learning subspace `S` assigned to one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceMask {
    pub task: usize,
    pub origin: SubspaceOrigin,
    pub mask: FeatureMask,
}

impl SubspaceMask {
    pub fn size(&self) -> usize {
        self.mask.count()
    }
}

/// Union of every subspace assigned so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedMask {
    pub mask: FeatureMask,
}

impl AccumulatedMask {
    pub fn empty(dim: usize) -> Self {
        Self {
            mask: FeatureMask::zeros(dim),
        }
    }

    pub fn full(dim: usize) -> Self {
        Self {
            mask: FeatureMask::ones(dim),
        }
    }
}

/// Default subspace size `⌊d / T⌋`.
pub fn default_subspace_size(dim: usize, tasks: usize) -> usize {
    dim / tasks.max(1)
}

/// Blank block `[(t-1)k, tk)` for the 1-based task `task`.
pub fn blank_subspace(task: usize, size: usize, dim: usize) -> Result<SubspaceMask> {
    if task == 0 || size == 0 {
        return Err(LabError::Config("task id and subspace size must be at least 1".into()));
    }
    if task * size > dim {
        return Err(LabError::NoBlankSubspace { task, size, dim });
    }
    Ok(SubspaceMask {
        task,
        origin: SubspaceOrigin::Blank,
        mask: FeatureMask::range(dim, (task - 1) * size, task * size),
    })
}

/// Population variance of each classifier column over the rows in `classes`.
pub fn column_variances(classifier: &Matrix, classes: &[usize]) -> Vec<f64> {
    let n = classes.len() as f64;
    (0..classifier.cols())
        .map(|i| {
            let mean = classes.iter().map(|&c| classifier[(c, i)]).sum::<f64>() / n;
            classes
                .iter()
                .map(|&c| {
                    let d = classifier[(c, i)] - mean;
                    d * d
                })
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Picks the `size` dimensions whose classifier weights vary least across
/// `seen_classes`; ties go to the lower dimension index.
pub fn reuse_subspace(task: usize, classifier: &Matrix, size: usize, seen_classes: &[usize]) -> Result<SubspaceMask> {
    let dim = classifier.cols();
    if size == 0 || size > dim {
        return Err(LabError::Config(format!("subspace size {size} must lie in [1, {dim}]")));
    }
    if seen_classes.len() < 2 {
        return Err(LabError::Config(format!(
            "subspace reuse needs at least 2 seen classes, got {}",
            seen_classes.len()
        )));
    }
    if let Some(&c) = seen_classes.iter().find(|&&c| c >= classifier.rows()) {
        return Err(LabError::InvalidLabel { label: c });
    }
    let variances = column_variances(classifier, seen_classes);
    let mut order: Vec<usize> = (0..dim).collect();
    // stable sort keeps index order among equal variances
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]));
    order.truncate(size);
    Ok(SubspaceMask {
        task,
        origin: SubspaceOrigin::Reused,
        mask: FeatureMask::from_indices(dim, &order),
    })
}

pub fn accumulate(previous: &AccumulatedMask, current: &SubspaceMask) -> Result<AccumulatedMask> {
    Ok(AccumulatedMask {
        mask: previous.mask.union(&current.mask)?,
    })
}

/// Masks a vector.
pub fn apply_mask(values: &[f64], mask: &FeatureMask) -> Result<Vec<f64>> {
    mask.apply(values)
}
