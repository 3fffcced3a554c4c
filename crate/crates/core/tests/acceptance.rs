//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use ocl_lab::buffer::ReplayBuffer;
use ocl_lab::data::{split_tasks, synth_gaussian, Batch, GaussianSpec};
use ocl_lab::eval::AccuracyMatrix;
use ocl_lab::experiment::{self, parse_config, run_grid, MethodId, RunReport};
use ocl_lab::matrix::{dot, Matrix};
use ocl_lab::nn::{masked_cross_entropy, GradientBundle, LinearClassifier, ModelBundle, ModelShape};
use ocl_lab::subspace::{reuse_subspace, FeatureMask};
use ocl_lab::trainer::{loss_er, loss_er_fsl, loss_finetune, LossOutput, Method, TrainConfig, TrainerState};
use ocl_lab::Execution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose gradient
/// is (near) zero are judged on absolute error.
const FD_FLOOR: f64 = 1e-5;
const FD_BUDGET_S: f64 = 10.0;
const IDENTITY_TOL: f64 = 1e-12;
const RESERVOIR_TOL: f64 = 0.02;
const RESERVOIR_BUDGET_S: f64 = 30.0;
const ACCURACY_MARGIN: f64 = 0.02;
const FINETUNE_TASK1_CEILING: f64 = 0.20;
const RUN_BUDGET_S: f64 = 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn random_batch(rng: &mut impl Rng, n: usize, input: usize, classes: &[usize]) -> Batch {
    Batch {
        x: Matrix::from_vec(n, input, (0..n * input).map(|_| rng.random::<f64>()).collect()).unwrap(),
        labels: (0..n).map(|_| *classes.choose(rng).unwrap()).collect(),
        ids: (0..n).collect(),
    }
}

fn random_model(rng: &mut ChaCha8Rng, input: usize, d: usize, classes: usize) -> ModelBundle {
    let hidden = vec![rng.random_range(3..=6)];
    let shape = ModelShape {
        input_dim: input,
        hidden,
        feature_dim: d,
        classes,
    };
    let mut model = ModelBundle::init(&shape, rng.random());
    // non-zero biases keep pre-activations away from the ReLU kink at 0
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    model
}

/// Random non-empty mask pair `S ⊆ A`.
fn random_masks(rng: &mut impl Rng, d: usize) -> (FeatureMask, FeatureMask) {
    let a: Vec<bool> = (0..d).map(|_| rng.random_bool(0.7)).collect();
    let mut a = if a.iter().any(|&b| b) { a } else { vec![true; d] };
    let on: Vec<usize> = (0..d).filter(|&i| a[i]).collect();
    let first = *on.choose(rng).unwrap();
    let s: Vec<bool> = (0..d).map(|i| i == first || (a[i] && rng.random_bool(0.5))).collect();
    a[first] = true;
    (FeatureMask::from_bits(s), FeatureMask::from_bits(a))
}

fn fd_check(model: &ModelBundle, loss: &dyn Fn(&ModelBundle) -> LossOutput) -> (f64, usize) {
    let analytic = loss(model).grads;
    let names: Vec<String> = analytic.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        for k in 0..len {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut tensors = m.tensors_mut();
                let (n, t) = &mut tensors[ti];
                assert_eq!(n, name);
                t[k] += delta;
                drop(tensors);
                loss(&m).total
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 3];
    let mut coords = 0;
    for _ in 0..50 {
        let input = rng.random_range(2..=5);
        let d = rng.random_range(2..=8);
        let class_count = rng.random_range(3..=5);
        let model = random_model(&mut rng, input, d, class_count);
        let mut seen: Vec<usize> = (0..class_count).collect();
        seen.shuffle(&mut rng);
        seen.truncate(rng.random_range(2..=class_count));
        let n_cur = rng.random_range(1..=4);
        let n_rep = rng.random_range(1..=4);
        let cur = random_batch(&mut rng, n_cur, input, &seen);
        let rep = random_batch(&mut rng, n_rep, input, &seen);
        let (s, a) = random_masks(&mut rng, d);
        let gamma = rng.random_range(0.0..1.0);

        let (w, n) = fd_check(&model, &|m| loss_finetune(m, &cur, &seen).unwrap());
        worst[0] = worst[0].max(w);
        coords += n;
        let (w, n) = fd_check(&model, &|m| loss_er(m, &cur, &rep, &seen).unwrap());
        worst[1] = worst[1].max(w);
        coords += n;
        let (w, n) = fd_check(&model, &|m| loss_er_fsl(m, &cur, &rep, &s, &a, gamma, &seen).unwrap());
        worst[2] = worst[2].max(w);
        coords += n;
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w < FD_REL_TOL) && secs < FD_BUDGET_S;
    outcome(
        pass,
        format!(
            "gradient check: worst rel err finetune {:.2e}, er {:.2e}, erfsl {:.2e} over {coords} coords (tol {FD_REL_TOL:e}); {secs:.1}s (budget {FD_BUDGET_S}s)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let classes = rng.random_range(2..=8);
        let w = random_matrix(&mut rng, classes, d, 1.0);
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
        let y = rng.random_range(0..classes);
        let all: Vec<usize> = (0..classes).collect();
        let ce = masked_cross_entropy(
            &Matrix::from_vec(1, d, z.clone()).unwrap(),
            &[y],
            &LinearClassifier::new(w.clone()),
            &FeatureMask::ones(d),
            &all,
        )
        .unwrap();
        // independent softmax
        let logits: Vec<f64> = (0..classes).map(|c| dot(w.row(c), &z)).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for i in 0..d {
            let mut expected = (p[y] - 1.0) * w[(y, i)];
            for c in (0..classes).filter(|&c| c != y) {
                expected += p[c] * w[(c, i)];
            }
            worst = worst.max((ce.feature_grad[(0, i)] - expected).abs());
        }
    }
    outcome(
        worst <= IDENTITY_TOL,
        format!("feature-gradient identity: max abs diff {worst:.2e} over 100 instances (tol {IDENTITY_TOL:e})"),
    )
}

fn loss_diff(a: &LossOutput, b: &LossOutput) -> f64 {
    (a.total - b.total).abs().max(a.grads.max_abs_diff(&b.grads))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_a = 0.0f64;
    let mut worst_b = 0.0f64;
    for _ in 0..100 {
        let input = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let class_count = rng.random_range(2..=6);
        let model = random_model(&mut rng, input, d, class_count);
        let seen: Vec<usize> = (0..class_count).collect();
        let n = rng.random_range(1..=6);
        let cur = random_batch(&mut rng, n, input, &seen);
        let rep = random_batch(&mut rng, n, input, &seen);
        let ones = FeatureMask::ones(d);
        let fsl = loss_er_fsl(&model, &cur, &rep, &ones, &ones, 0.5, &seen).unwrap();
        let er = loss_er(&model, &cur, &rep, &seen).unwrap();
        worst_a = worst_a.max(loss_diff(&fsl, &er));
        let empty = Batch {
            x: Matrix::zeros(0, input),
            labels: vec![],
            ids: vec![],
        };
        let er_empty = loss_er(&model, &cur, &empty, &seen).unwrap();
        let ft = loss_finetune(&model, &cur, &seen).unwrap();
        worst_b = worst_b.max(loss_diff(&er_empty, &ft));
    }
    outcome(
        worst_a <= IDENTITY_TOL && worst_b <= IDENTITY_TOL,
        format!(
            "reductions: erfsl(ones, 0.5) vs er {worst_a:.2e}, er(empty) vs finetune {worst_b:.2e} over 100 instances each (tol {IDENTITY_TOL:e})"
        ),
    )
}

fn criterion_4() -> Outcome {
    let data = synth_gaussian(&GaussianSpec {
        class_count: 4,
        input_dim: 6,
        per_class: 60,
        separation: 3.0,
        seed: 4,
    })
    .unwrap();
    let seq = split_tasks(&data, 2, 4).unwrap();
    let d = 8;
    let model = ModelBundle::init(
        &ModelShape {
            input_dim: 6,
            hidden: vec![10],
            feature_dim: d,
            classes: 4,
        },
        4,
    );
    let mut cfg = TrainConfig::new(Method::ErFsl, 2);
    cfg.lr = 0.1;
    cfg.buffer_capacity = 40;
    let mut state = TrainerState::new(model, &cfg).unwrap();
    let mut steps = 0usize;
    let mut violations = 0usize;
    let mut coords = 0usize;
    for task in &seq.tasks {
        state
            .train_task_inspect(task, &cfg, |_, grads: &GradientBundle, acc: &FeatureMask| {
                steps += 1;
                let last = grads.layers.last().unwrap();
                for i in (0..d).filter(|&i| !acc.get(i)) {
                    for c in 0..grads.classifier.rows() {
                        coords += 1;
                        violations += usize::from(grads.classifier[(c, i)] != 0.0);
                    }
                    for &g in last.weights.row(i) {
                        coords += 1;
                        violations += usize::from(g != 0.0);
                    }
                    coords += 1;
                    violations += usize::from(last.bias[i] != 0.0);
                }
            })
            .unwrap();
    }
    outcome(
        violations == 0 && steps > 0 && coords > 0,
        format!(
            "mask confinement: {violations} non-zero gradient coords outside the accumulated mask across {steps} steps ({coords} checked)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let (m, n, trials) = (50usize, 500usize, 10_000u64);
    let mut counts = vec![0u64; n];
    for trial in 0..trials {
        let mut buf = ReplayBuffer::new(m, 1, trial).unwrap();
        for i in 0..n {
            buf.offer(&[i as f64], 0).unwrap();
        }
        for slot in 0..buf.len() {
            counts[buf.sample(slot)[0] as usize] += 1;
        }
    }
    let expected = m as f64 / n as f64;
    let worst = counts
        .iter()
        .map(|&c| (c as f64 / trials as f64 - expected).abs())
        .fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= RESERVOIR_TOL && secs < RESERVOIR_BUDGET_S,
        format!(
            "reservoir law: max |freq - {expected}| = {worst:.4} (tol {RESERVOIR_TOL}); {secs:.1}s (budget {RESERVOIR_BUDGET_S}s)"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for case in 0..200 {
        let d = rng.random_range(1..=32);
        let classes = rng.random_range(2..=10);
        let mut w = random_matrix(&mut rng, classes, d, 1.0);
        if case % 4 == 0 && d > 1 {
            // duplicated columns force variance ties
            for r in 0..classes {
                let v = w[(r, 0)];
                let row = w.row_mut(r);
                row[d - 1] = v;
            }
        }
        let mut seen: Vec<usize> = (0..classes).collect();
        seen.shuffle(&mut rng);
        seen.truncate(rng.random_range(2..=classes));
        let k = rng.random_range(1..=d);
        let got = reuse_subspace(3, &w, k, &seen).unwrap().mask.indices();
        // brute force: population variance per column, sort by (variance, index)
        let mut keyed: Vec<(f64, usize)> = (0..d)
            .map(|i| {
                let vals: Vec<f64> = seen.iter().map(|&c| w[(c, i)]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                (var, i)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
        want.sort_unstable();
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("reuse oracle: {mismatches} mismatches over 200 random classifiers"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut bad = 0;
    for _ in 0..100 {
        let t = rng.random_range(2..=8);
        let rows: Vec<Vec<f64>> = (1..=t)
            .map(|i| (0..i).map(|_| rng.random_range(0..=100) as f64 / 100.0).collect())
            .collect();
        let m = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let mut s = 0.0;
            for v in row {
                s += v;
            }
            if m.average_accuracy(i + 1).unwrap() != s / row.len() as f64 {
                bad += 1;
            }
        }
        let last = &rows[t - 1];
        if m.final_accuracy().unwrap() != last.iter().sum::<f64>() / t as f64 {
            bad += 1;
        }
        let mut f = 0.0;
        for j in 0..t - 1 {
            let mut best = f64::NEG_INFINITY;
            for row in rows.iter().take(t - 1).skip(j) {
                if row[j] > best {
                    best = row[j];
                }
            }
            f += best - last[j];
        }
        f /= (t - 1) as f64;
        if (m.final_forgetting().unwrap() - f).abs() > 1e-15 {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("metric arithmetic: {bad} mismatches over 100 random matrices"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_at(report: &RunReport, m: MethodId) -> f64 {
    median(report.runs_of(m).map(|r| r.final_accuracy).collect())
}

fn desk_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn criterion_8(report: &RunReport) -> Outcome {
    let ft = median_at(report, MethodId::Finetune);
    let er = median_at(report, MethodId::Er);
    let fsl = median_at(report, MethodId::Erfsl);
    let task1 = report
        .runs_of(MethodId::Finetune)
        .map(|r| r.matrix.rows().last().unwrap()[0])
        .fold(0.0, f64::max);
    let slowest = report.runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let pass = ft < er
        && er < fsl
        && fsl - er >= ACCURACY_MARGIN
        && task1 < FINETUNE_TASK1_CEILING
        && slowest < RUN_BUDGET_S
        && report.is_success();
    outcome(
        pass,
        format!(
            "desk benchmark medians: finetune {ft:.4} < er {er:.4} < erfsl {fsl:.4} (margin {:.4}, need {ACCURACY_MARGIN}); finetune task-1 max {task1:.4} (< {FINETUNE_TASK1_CEILING}); slowest run {slowest:.1}s single-threaded (< {RUN_BUDGET_S}s)",
            fsl - er
        ),
    )
}

fn criterion_9(report: &RunReport) -> Outcome {
    let mut ordered = 0;
    let mut runs = 0;
    let mut worst_identity = 0.0f64;
    let mut means = Vec::new();
    for r in report.runs_of(MethodId::Finetune) {
        runs += 1;
        let Some(p) = &r.profile else { continue };
        if p.new_mean > p.old_mean {
            ordered += 1;
        }
        means.push(format!("{:.4}/{:.4}", p.new_mean, p.old_mean));
        // decomposition identity on the same buffered samples
        let contents = r.state.buffer.contents();
        let rows: Vec<usize> = (0..contents.len())
            .filter(|&i| p.old_classes.contains(&contents.labels[i]))
            .collect();
        let z = r.state.model.extractor.forward(&contents.x.select_rows(&rows)).unwrap();
        let mask = r.state.prediction_mask();
        for &c in p.old_classes.iter().chain(&p.new_classes) {
            let w = mask.apply(r.state.model.classifier.prototype(c)).unwrap();
            let mean_logit = z.row_iter().map(|zr| dot(&w, &mask.apply(zr).unwrap())).sum::<f64>() / rows.len() as f64;
            worst_identity = worst_identity.max((p.class_total(c).unwrap() - mean_logit).abs());
        }
    }
    outcome(
        runs > 0 && ordered == runs && worst_identity <= IDENTITY_TOL,
        format!(
            "finetune inner-product profile: new > old in {ordered}/{runs} runs (new/old means {}); decomposition identity max diff {worst_identity:.2e} (tol {IDENTITY_TOL:e})",
            means.join(", ")
        ),
    )
}

fn criterion_10(report: &RunReport) -> Outcome {
    let full = median_at(report, MethodId::Erfsl);
    let variants = [
        MethodId::ErfslFixedS,
        MethodId::ErfslInverted,
        MethodId::ErfslUnweighted,
    ];
    let parts: Vec<String> = variants
        .iter()
        .map(|&m| format!("{m} {:.4}", median_at(report, m)))
        .collect();
    let pass = variants.iter().all(|&m| full >= median_at(report, m));
    outcome(
        pass,
        format!("ablations: erfsl median {full:.4} vs {}", parts.join(", ")),
    )
}

fn criterion_11() -> Outcome {
    let mut cfg = parse_config(desk_config_path()).unwrap();
    cfg.experiment.methods = vec![MethodId::Finetune, MethodId::Er, MethodId::Erfsl];
    cfg.experiment.seeds = vec![7, 8];
    if let experiment::DataSection::Synth { per_class, .. } = &mut cfg.data {
        *per_class = 250;
    }
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    experiment::run(&cfg, &a, Execution::Parallel, None).unwrap();
    experiment::run(&cfg, &b, Execution::Sequential, None).unwrap();
    let ra = std::fs::read(a.join("results.csv")).unwrap();
    let rb = std::fs::read(b.join("results.csv")).unwrap();
    outcome(
        ra == rb && !ra.is_empty(),
        format!(
            "determinism: results.csv {} bytes, identical across two runs (parallel, then sequential): {}",
            ra.len(),
            ra == rb
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
    ];
    let cfg = parse_config(desk_config_path()).expect("desk config");
    let report = run_grid(&cfg, Execution::Sequential, None).expect("desk grid");
    results.push((8, criterion_8(&report)));
    results.push((9, criterion_9(&report)));
    results.push((10, criterion_10(&report)));
    results.push((11, criterion_11()));

    let mut failed = 0;
    for (n, o) in &results {
        println!(
            "criterion {n:>2}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
