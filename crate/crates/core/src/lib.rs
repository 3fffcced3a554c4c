//! Online continual-learning lab.
//!
//! A small, deterministic laboratory for class-incremental online learning
//! with three training rules: finetune (no anti-forgetting), experience
//! replay (ER), and experience replay with feature subspace learning
//! (ER-FSL), where current samples are learned in a per-task slice of the
//! feature space and replayed samples in the union of all slices so far.
//!
//! The pieces:
//!
//! - [`matrix`], [`nn`]: dense `f64` arithmetic, a rectified MLP feature
//!   extractor, a bias-free linear classifier, masked cross-entropy with
//!   hand-derived gradients, SGD.
//! - [`data`]: IDX / CSV / synthetic Gaussian datasets, class-disjoint task
//!   splits, single-pass batch streams.
//! - [`buffer`]: reservoir replay memory.
//! - [`subspace`]: learning subspaces and the accumulated space.
//! - [`trainer`]: the losses and the online training loop.
//! - [`eval`]: prediction, accuracy matrix, forgetting, logit decomposition.
//! - [`experiment`]: config files, the method × seed grid, result files.
//!
//! With the default `parallel` feature, independent work (runs of the grid,
//! evaluation of several test sets) fans out over rayon.

pub mod buffer;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod matrix;
pub mod nn;
pub mod par;
pub mod seed;
pub mod subspace;
pub mod trainer;

pub use error::{LabError, Result};
pub use matrix::Matrix;
pub use par::Execution;
