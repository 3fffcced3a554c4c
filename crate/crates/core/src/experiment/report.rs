//! Result files.
//!
//! ```text
//! <out>/config.toml          effective configuration
//! <out>/results.csv          final accuracy row per run, plus a mean row per method
//! <out>/matrices.csv         every accuracy-matrix row of every run
//! <out>/summary.json         per-method mean and 95% interval of A_T and F_T
//! <out>/logs/<run>.ndjson    one step record per line
//! <out>/profiles/<run>.csv   logit decomposition (with `profile = true`)
//! <out>/snapshots/<run>/     model.json + buffer.bin (with `snapshots = true`)
//! ```
//!
//! The CSV files carry no timing, so two runs of the same configuration
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{MethodId, RunReport, RunResult};
use crate::buffer::ReplayBuffer;
use crate::data::ClassMap;
use crate::error::{LabError, Result};
use crate::nn::ModelBundle;
use crate::subspace::FeatureMask;

pub const MODEL_SNAPSHOT_FORMAT: &str = "ocl-lab-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub runs: usize,
    #[serde(rename = "mean_AT")]
    pub mean_at: f64,
    #[serde(rename = "ci95_AT")]
    pub ci95_at: Option<f64>,
    #[serde(rename = "mean_FT")]
    pub mean_ft: Option<f64>,
    #[serde(rename = "ci95_FT")]
    pub ci95_ft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: MethodId,
    pub seed: u64,
    #[serde(rename = "A_T")]
    pub a_t: f64,
    #[serde(rename = "F_T")]
    pub f_t: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: usize,
    pub methods: BTreeMap<MethodId, MethodSummary>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<String>,
}

/// Mean and half-width of the two-sided 95% Student-t interval.
fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof >= 1").inverse_cdf(0.975);
    (mean, Some(t * (var / n).sqrt()))
}

impl Summary {
    pub fn from_report(report: &RunReport) -> Self {
        let mut methods = BTreeMap::new();
        for &m in &report.config.experiment.methods {
            let runs: Vec<&RunResult> = report.runs_of(m).collect();
            if runs.is_empty() {
                continue;
            }
            let at: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
            let ft: Vec<f64> = runs.iter().filter_map(|r| r.final_forgetting).collect();
            let (mean_at, ci_at) = mean_ci95(&at);
            let (mean_ft, ci_ft) = if ft.is_empty() {
                (None, None)
            } else {
                let (m, c) = mean_ci95(&ft);
                (Some(m), c)
            };
            methods.insert(
                m,
                MethodSummary {
                    runs: runs.len(),
                    mean_at,
                    ci95_at: ci_at,
                    mean_ft,
                    ci95_ft: ci_ft,
                },
            );
        }
        Summary {
            tasks: report.config.experiment.tasks,
            methods,
            runs: report
                .runs
                .iter()
                .map(|r| RunSummary {
                    method: r.method,
                    seed: r.seed,
                    a_t: r.final_accuracy,
                    f_t: r.final_forgetting,
                    seconds: r.seconds,
                })
                .collect(),
            failures: report
                .failures
                .iter()
                .map(|f| format!("{} seed {}: {}", f.method, f.seed, f.error))
                .collect(),
        }
    }
}

/// Final model state of one run; the buffer lives next to it in binary form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub format: String,
    pub method: MethodId,
    pub seed: u64,
    pub model: ModelBundle,
    pub prediction_mask: FeatureMask,
    pub seen_classes: Vec<usize>,
    pub class_map: ClassMap,
    pub tasks_trained: usize,
    /// Buffer file name, relative to the snapshot.
    pub buffer: String,
}

/// Reads a model snapshot and the buffer it points to.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<(ModelSnapshot, ReplayBuffer)> {
    let path = path.as_ref();
    let snap: ModelSnapshot = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    if snap.format != MODEL_SNAPSHOT_FORMAT {
        return Err(LabError::Format {
            offset: 0,
            message: format!("snapshot format {:?}, expected {MODEL_SNAPSHOT_FORMAT:?}", snap.format),
        });
    }
    let buffer_path = path.parent().unwrap_or(Path::new(".")).join(&snap.buffer);
    let buffer = ReplayBuffer::read_snapshot(std::io::BufReader::new(File::open(buffer_path)?))?;
    Ok((snap, buffer))
}

fn run_name(r: &RunResult) -> String {
    format!("{}_seed{}", r.method, r.seed)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn accuracy_header(tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = ["method", "seed", "task_index", "A_i"].map(String::from).to_vec();
    h.extend((1..=tasks).map(|j| format!("a_{j}")));
    h
}

fn accuracy_record(method: &str, seed: &str, i: usize, row: &[f64], tasks: usize) -> Vec<String> {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let mut rec = vec![
        method.to_string(),
        seed.to_string(),
        i.to_string(),
        format!("{mean:.6}"),
    ];
    rec.extend(row.iter().map(|v| format!("{v:.6}")));
    rec.extend(std::iter::repeat_n(String::new(), tasks - row.len()));
    rec
}

fn write_results(report: &RunReport, path: &Path) -> Result<()> {
    let tasks = report.config.experiment.tasks;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(accuracy_header(tasks))?;
    for &m in &report.config.experiment.methods {
        let runs: Vec<&RunResult> = report.runs_of(m).collect();
        for r in &runs {
            w.write_record(accuracy_record(
                m.name(),
                &r.seed.to_string(),
                tasks,
                &r.matrix.rows()[tasks - 1],
                tasks,
            ))?;
        }
        if !runs.is_empty() {
            let mean_row: Vec<f64> = (0..tasks)
                .map(|j| runs.iter().map(|r| r.matrix.rows()[tasks - 1][j]).sum::<f64>() / runs.len() as f64)
                .collect();
            w.write_record(accuracy_record(m.name(), "mean", tasks, &mean_row, tasks))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_matrices(report: &RunReport, path: &Path) -> Result<()> {
    let tasks = report.config.experiment.tasks;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(accuracy_header(tasks))?;
    for r in &report.runs {
        for (i, row) in r.matrix.rows().iter().enumerate() {
            w.write_record(accuracy_record(r.method.name(), &r.seed.to_string(), i + 1, row, tasks))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_snapshot(r: &RunResult, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut buf = create(&dir.join("buffer.bin"))?;
    r.state.buffer.write_snapshot(&mut buf)?;
    buf.flush()?;
    let snap = ModelSnapshot {
        format: MODEL_SNAPSHOT_FORMAT.to_string(),
        method: r.method,
        seed: r.seed,
        model: r.state.model.clone(),
        prediction_mask: r.state.prediction_mask().clone(),
        seen_classes: r.state.seen_classes.clone(),
        class_map: r.class_map.clone(),
        tasks_trained: r.state.current_task,
        buffer: "buffer.bin".to_string(),
    };
    let path = dir.join("model.json");
    let mut w = create(&path)?;
    serde_json::to_writer(&mut w, &snap)?;
    w.flush()?;
    Ok(path)
}

/// Writes every result file of `report` under `out_dir`.
pub fn write_outputs(report: &RunReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), report.config.to_toml_string()?)?;
    write_results(report, &out_dir.join("results.csv"))?;
    write_matrices(report, &out_dir.join("matrices.csv"))?;
    let mut w = create(&out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut w, &report.summary())?;
    w.write_all(b"\n")?;
    w.flush()?;

    let exp = &report.config.experiment;
    if exp.step_logs {
        let dir = out_dir.join("logs");
        fs::create_dir_all(&dir)?;
        for r in &report.runs {
            let mut w = create(&dir.join(format!("{}.ndjson", run_name(r))))?;
            for step in &r.steps {
                serde_json::to_writer(&mut w, step)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    if exp.profile {
        let dir = out_dir.join("profiles");
        fs::create_dir_all(&dir)?;
        for r in &report.runs {
            if let Some(p) = &r.profile {
                p.write_csv(create(&dir.join(format!("{}.csv", run_name(r))))?)?;
            }
        }
    }
    if exp.snapshots {
        for r in &report.runs {
            write_snapshot(r, &out_dir.join("snapshots").join(run_name(r)))?;
        }
    }
    Ok(())
}
