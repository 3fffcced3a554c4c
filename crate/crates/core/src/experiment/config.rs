//! Experiment configuration files (TOML).
//!
//! ```toml
//! [experiment]
//! tasks = 5
//! methods = ["finetune", "er", "erfsl"]
//! seeds = [0, 1, 2]
//!
//! [data]
//! source = "synth"
//! classes = 10
//! input_dim = 32
//! per_class = 1250
//! separation = 4.0
//!
//! [model]
//! hidden = [128]
//! feature_dim = 64
//!
//! [train]
//! lr = 0.2
//!
//! [method.erfsl]
//! gamma = 0.4
//! ```
//!
//! Every table rejects unknown keys. `[train]` holds defaults shared by all
//! methods; `[method.<id>]` tables override them per method.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::subspace::default_subspace_size;
use crate::trainer::{Ablation, Method, TrainConfig};

/// A method of the grid: a base method plus an optional ER-FSL ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Finetune,
    Er,
    Erfsl,
    ErfslFixedS,
    ErfslInverted,
    ErfslUnweighted,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::Finetune,
        MethodId::Er,
        MethodId::Erfsl,
        MethodId::ErfslFixedS,
        MethodId::ErfslInverted,
        MethodId::ErfslUnweighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Finetune => "finetune",
            MethodId::Er => "er",
            MethodId::Erfsl => "erfsl",
            MethodId::ErfslFixedS => "erfsl_fixed_s",
            MethodId::ErfslInverted => "erfsl_inverted",
            MethodId::ErfslUnweighted => "erfsl_unweighted",
        }
    }

    pub fn method(self) -> Method {
        match self {
            MethodId::Finetune => Method::Finetune,
            MethodId::Er => Method::Er,
            _ => Method::ErFsl,
        }
    }

    pub fn ablation(self) -> Ablation {
        match self {
            MethodId::ErfslFixedS => Ablation::FixedS,
            MethodId::ErfslInverted => Ablation::InvertedSpaces,
            MethodId::ErfslUnweighted => Ablation::Unweighted,
            _ => Ablation::None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub tasks: usize,
    pub methods: Vec<MethodId>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Write inner-product profiles of buffered samples after each run.
    #[serde(default)]
    pub profile: bool,
    /// Save the final model and buffer of each run.
    #[serde(default)]
    pub snapshots: bool,
    #[serde(default = "yes")]
    pub step_logs: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Synth {
        classes: usize,
        input_dim: usize,
        /// Samples per class before the train/test split.
        per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

fn default_feature_dim() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            feature_dim: default_feature_dim(),
        }
    }
}

/// Shared training defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_batch")]
    pub replay_batch: usize,
    #[serde(default = "default_buffer")]
    pub buffer: usize,
    /// Defaults to `⌊feature_dim / tasks⌋`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_size: Option<usize>,
}

fn default_lr() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    0.5
}

fn default_batch() -> usize {
    10
}

fn default_buffer() -> usize {
    500
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            gamma: default_gamma(),
            batch_size: default_batch(),
            replay_batch: default_batch(),
            buffer: default_buffer(),
            subspace_size: None,
        }
    }
}

/// Per-method overrides of [`TrainSection`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub method: BTreeMap<MethodId, TrainOverrides>,
}

fn range_error(key: &str, message: impl fmt::Display) -> LabError {
    LabError::Config(format!("{key}: {message}"))
}

impl ExperimentConfig {
    /// Parses TOML text. Relative data paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                fix(test_images);
                fix(test_labels);
            }
            DataSection::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DataSection::Synth { .. } => {}
        }
        if let Some(out) = &mut self.experiment.out_dir {
            fix(out);
        }
    }

    /// Checks ranges, fills derived defaults and de-duplicates seeds.
    pub fn validate(&mut self) -> Result<()> {
        let e = &mut self.experiment;
        if e.tasks == 0 {
            return Err(range_error("experiment.tasks", "must be at least 1"));
        }
        if e.methods.is_empty() {
            return Err(range_error("experiment.methods", "at least one method is required"));
        }
        if e.seeds.is_empty() {
            return Err(range_error("experiment.seeds", "at least one seed is required"));
        }
        let mut unique = Vec::with_capacity(e.seeds.len());
        for &s in &e.seeds {
            if unique.contains(&s) {
                log::warn!("experiment.seeds: duplicate seed {s} ignored");
            } else {
                unique.push(s);
            }
        }
        e.seeds = unique;
        let mut methods = Vec::with_capacity(e.methods.len());
        for &m in &e.methods {
            if methods.contains(&m) {
                log::warn!("experiment.methods: duplicate method {m} ignored");
            } else {
                methods.push(m);
            }
        }
        e.methods = methods;

        match &self.data {
            DataSection::Synth {
                classes,
                input_dim,
                per_class,
                separation,
                test_fraction,
                ..
            } => {
                if *classes < 2 {
                    return Err(range_error("data.classes", "must be at least 2"));
                }
                if *input_dim == 0 {
                    return Err(range_error("data.input_dim", "must be at least 1"));
                }
                if *per_class < 2 {
                    return Err(range_error("data.per_class", "must be at least 2"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(range_error("data.separation", "must be finite and >= 0"));
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(range_error("data.test_fraction", "must lie in (0, 1)"));
                }
                if !classes.is_multiple_of(self.experiment.tasks) {
                    return Err(range_error(
                        "experiment.tasks",
                        format!("{classes} classes cannot be split into {} tasks", self.experiment.tasks),
                    ));
                }
            }
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for (key, p) in [
                    ("data.train_images", train_images),
                    ("data.train_labels", train_labels),
                    ("data.test_images", test_images),
                    ("data.test_labels", test_labels),
                ] {
                    if !p.is_file() {
                        return Err(range_error(key, format!("{} does not exist", p.display())));
                    }
                }
            }
            DataSection::Csv { train, test, classes } => {
                for (key, p) in [("data.train", train), ("data.test", test)] {
                    if !p.is_file() {
                        return Err(range_error(key, format!("{} does not exist", p.display())));
                    }
                }
                if matches!(classes, Some(c) if *c < 2) {
                    return Err(range_error("data.classes", "must be at least 2"));
                }
            }
        }

        if self.model.feature_dim == 0 {
            return Err(range_error("model.feature_dim", "must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Err(range_error("model.hidden", "layer widths must be at least 1"));
        }
        let size = self
            .train
            .subspace_size
            .unwrap_or_else(|| default_subspace_size(self.model.feature_dim, self.experiment.tasks));
        self.train.subspace_size = Some(size);
        check_train("train", &self.train.clone().into_overrides(), self.model.feature_dim)?;
        for (id, o) in &self.method {
            check_train(&format!("method.{id}"), o, self.model.feature_dim)?;
        }
        for &id in &self.experiment.methods {
            let cfg = self.train_config(id, 0);
            if id.method() == Method::ErFsl && cfg.subspace_size == 0 {
                return Err(range_error(
                    "train.subspace_size",
                    "resolves to 0; set it explicitly or use fewer tasks",
                ));
            }
        }
        Ok(())
    }

    /// Effective training settings for `method` under run seed `seed`.
    pub fn train_config(&self, method: MethodId, seed: u64) -> TrainConfig {
        let t = &self.train;
        let o = self.method.get(&method).cloned().unwrap_or_default();
        TrainConfig {
            method: method.method(),
            ablation: method.ablation(),
            gamma: o.gamma.unwrap_or(t.gamma),
            lr: o.lr.unwrap_or(t.lr),
            current_batch: o.batch_size.unwrap_or(t.batch_size),
            replay_batch: o.replay_batch.unwrap_or(t.replay_batch),
            buffer_capacity: o.buffer.unwrap_or(t.buffer),
            subspace_size: o
                .subspace_size
                .or(t.subspace_size)
                .unwrap_or_else(|| default_subspace_size(self.model.feature_dim, self.experiment.tasks)),
            seed,
        }
    }
}

impl TrainSection {
    fn into_overrides(self) -> TrainOverrides {
        TrainOverrides {
            lr: Some(self.lr),
            gamma: Some(self.gamma),
            batch_size: Some(self.batch_size),
            replay_batch: Some(self.replay_batch),
            buffer: Some(self.buffer),
            subspace_size: self.subspace_size,
        }
    }
}

fn check_train(section: &str, o: &TrainOverrides, feature_dim: usize) -> Result<()> {
    if let Some(g) = o.gamma {
        if !(0.0..=1.0).contains(&g) {
            return Err(range_error(&format!("{section}.gamma"), format!("{g} outside [0, 1]")));
        }
    }
    if let Some(lr) = o.lr {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(range_error(
                &format!("{section}.lr"),
                format!("{lr} must be finite and > 0"),
            ));
        }
    }
    for (key, v) in [
        ("batch_size", o.batch_size),
        ("replay_batch", o.replay_batch),
        ("buffer", o.buffer),
    ] {
        if v == Some(0) {
            return Err(range_error(&format!("{section}.{key}"), "must be at least 1"));
        }
    }
    if let Some(k) = o.subspace_size {
        if k == 0 || k > feature_dim {
            return Err(range_error(
                &format!("{section}.subspace_size"),
                format!("{k} outside [1, {feature_dim}]"),
            ));
        }
    }
    Ok(())
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line}: `{}`)", text.get(r).unwrap_or("").trim())
        }
        None => String::new(),
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    let base = base.canonicalize().unwrap_or(base);
    ExperimentConfig::from_toml_str(&text, &base)
}
