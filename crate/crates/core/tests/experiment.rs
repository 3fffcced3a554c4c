use std::fs;
use std::path::Path;

use ocl_lab::buffer::ReplayBuffer;
use ocl_lab::data::{write_idx_images, write_idx_labels};
use ocl_lab::experiment::{self, load_snapshot, parse_config, snapshot_profile, ExperimentConfig, MethodId};
use ocl_lab::trainer::StepRecord;
use ocl_lab::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: &str = r#"
[experiment]
tasks = 2
methods = ["erfsl"]
seeds = [1, 2]
profile = true
snapshots = true

[data]
source = "synth"
classes = 4
input_dim = 6
per_class = 50
separation = 3.0
seed = 5

[model]
hidden = [12]
feature_dim = 8

[train]
lr = 0.1
buffer = 30
"#;

fn small(dir: &Path) -> ExperimentConfig {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    parse_config(&path).unwrap()
}

#[test]
fn two_seeds_one_method_gives_two_rows_and_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = dir.path().join("out");
    let report = experiment::run(&cfg, &out, Execution::Parallel, Some(2)).unwrap();
    assert!(report.is_success());

    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,seed,task_index,A_i,a_1,a_2");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("erfsl,1,2,"));
    assert!(lines[2].starts_with("erfsl,2,2,"));
    assert!(lines[3].starts_with("erfsl,mean,2,"));

    // the matrix file pads row 1 with an empty cell
    let matrices = fs::read_to_string(out.join("matrices.csv")).unwrap();
    assert!(matrices.lines().nth(1).unwrap().ends_with(','));
    assert_eq!(matrices.lines().count(), 1 + 2 * 2);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let m = &summary["methods"]["erfsl"];
    for key in ["mean_AT", "ci95_AT", "mean_FT", "ci95_FT"] {
        assert!(m[key].is_f64(), "{key} missing: {m}");
    }
    let a_t: Vec<f64> = report.runs.iter().map(|r| r.final_accuracy).collect();
    assert!((m["mean_AT"].as_f64().unwrap() - (a_t[0] + a_t[1]) / 2.0).abs() < 1e-12);
}

#[test]
fn step_logs_profiles_and_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = dir.path().join("out");
    let report = experiment::run(&cfg, &out, Execution::Sequential, None).unwrap();

    let log = fs::read_to_string(out.join("logs/erfsl_seed1.ndjson")).unwrap();
    let steps: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps, report.runs[0].steps);
    // 2 classes x 40 training samples per task, batches of 10
    assert_eq!(steps.len(), 2 * 80 / 10);
    assert!(steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert_eq!(steps[0].mask_id, "11110000");
    assert_eq!(steps.last().unwrap().mask_id, "00001111");

    let profile = fs::read_to_string(out.join("profiles/erfsl_seed1.csv")).unwrap();
    assert!(profile.starts_with("dim,group,mean_value\n"));
    assert_eq!(profile.lines().count(), 1 + 2 * 8);

    let echoed = out.join("config.toml");
    assert_eq!(parse_config(&echoed).unwrap(), cfg);
}

#[test]
fn snapshots_reload_and_reproduce_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = dir.path().join("out");
    let report = experiment::run(&cfg, &out, Execution::Parallel, None).unwrap();
    let run = &report.runs[1];

    let model_path = out.join("snapshots/erfsl_seed2/model.json");
    let (snap, buffer) = load_snapshot(&model_path).unwrap();
    assert_eq!(snap.method, MethodId::Erfsl);
    assert_eq!(snap.model, run.state.model);
    assert_eq!(buffer, run.state.buffer);
    let bytes = fs::read(out.join("snapshots/erfsl_seed2/buffer.bin")).unwrap();
    assert_eq!(&bytes[..4], b"RBF1");
    assert_eq!(ReplayBuffer::read_snapshot(bytes.as_slice()).unwrap(), buffer);

    let p = snapshot_profile(&snap, &buffer).unwrap().unwrap();
    assert_eq!(Some(&p), run.profile.as_ref());
}

#[test]
fn failed_runs_are_reported_without_stopping_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.experiment.methods = vec![MethodId::Er, MethodId::Erfsl];
    // legal for the config, fatal for the training loop: diverges to inf
    cfg.method.entry(MethodId::Er).or_default().lr = Some(1e300);
    let report = experiment::run_grid(&cfg, Execution::Parallel, None).unwrap();
    assert_eq!(report.failures.len(), 2);
    assert!(report.failures.iter().all(|f| f.method == MethodId::Er));
    assert_eq!(report.runs.len(), 2);
    assert!(!report.is_success());
    let summary = report.summary();
    assert!(summary.methods.contains_key(&MethodId::Erfsl));
    assert!(!summary.methods.contains_key(&MethodId::Er));
}

#[test]
fn adding_a_method_leaves_other_results_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.experiment.profile = false;
    let alone = experiment::run_grid(&cfg, Execution::Sequential, None).unwrap();
    cfg.experiment.methods = vec![MethodId::Finetune, MethodId::Erfsl, MethodId::Er];
    let together = experiment::run_grid(&cfg, Execution::Parallel, None).unwrap();
    for (a, b) in alone.runs.iter().zip(together.runs_of(MethodId::Erfsl)) {
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.steps, b.steps);
    }
}

#[test]
fn idx_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut write_pair = |name: &str, per_class: usize| {
        let (side, classes) = (4usize, 4usize);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                // class c lights up quadrant c
                for p in 0..side * side {
                    let (r, col) = (p / side, p % side);
                    let quadrant = (r / 2) * 2 + col / 2;
                    let base: u8 = if quadrant == c { 200 } else { 20 };
                    pixels.push(base.saturating_add(rng.random_range(0..40)));
                }
                labels.push(c as u8);
            }
        }
        fs::write(
            dir.path().join(format!("{name}-images.idx")),
            write_idx_images(labels.len(), side, side, &pixels),
        )
        .unwrap();
        fs::write(dir.path().join(format!("{name}-labels.idx")), write_idx_labels(&labels)).unwrap();
    };
    write_pair("train", 40);
    write_pair("test", 10);
    let text = r#"
[experiment]
tasks = 2
methods = ["finetune", "er", "erfsl"]
seeds = [0]

[data]
source = "idx"
train_images = "train-images.idx"
train_labels = "train-labels.idx"
test_images = "test-images.idx"
test_labels = "test-labels.idx"

[model]
hidden = [8]
feature_dim = 8

[train]
lr = 0.1
buffer = 20
"#;
    let path = dir.path().join("idx.toml");
    fs::write(&path, text).unwrap();
    let cfg = parse_config(&path).unwrap();
    let report = experiment::run(&cfg, &dir.path().join("out"), Execution::Parallel, None).unwrap();
    assert!(report.is_success());
    for r in &report.runs {
        assert_eq!(r.matrix.rows().len(), 2);
        assert!(r.final_accuracy > 0.0);
    }
    // relative paths are stored resolved, so the echo parses from elsewhere
    let echoed = parse_config(dir.path().join("out/config.toml")).unwrap();
    assert_eq!(echoed, cfg);
}
