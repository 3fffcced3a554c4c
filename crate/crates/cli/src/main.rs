use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ocl_lab::experiment::{self, load_snapshot, parse_config, snapshot_profile, threads_from_env};
use ocl_lab::Execution;

#[derive(Parser)]
#[command(name = "ocl-lab", version, about = "Online continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the method x seed grid of a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: experiment.out_dir, else ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Run the grid on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Parse and validate a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inspect a saved model snapshot.
    Analyze {
        /// Path to a snapshot's model.json.
        #[arg(long)]
        model: PathBuf,
        /// Print the per-dimension logit decomposition as CSV.
        #[arg(long)]
        profile: bool,
        /// Write the profile here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            out,
            seed_override,
            sequential,
        } => {
            let mut cfg = parse_config(&config).with_context(|| format!("invalid config {}", config.display()))?;
            if let Some(seed) = seed_override {
                cfg.experiment.seeds = vec![seed];
            }
            let out = out
                .or_else(|| cfg.experiment.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            };
            let report = experiment::run(&cfg, &out, exec, threads_from_env())
                .with_context(|| format!("run into {}", out.display()))?;
            for (method, s) in &report.summary().methods {
                log::info!(
                    "{method}: A_T {:.4} ± {:.4}, F_T {}",
                    s.mean_at,
                    s.ci95_at.unwrap_or(0.0),
                    s.mean_ft.map_or("n/a".to_string(), |f| format!("{f:.4}"))
                );
            }
            log::info!("results written to {}", out.display());
            if report.is_success() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &report.failures {
                    log::error!("{} seed {} failed: {}", f.method, f.seed, f.error);
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config).with_context(|| format!("invalid config {}", config.display()))?;
            println!(
                "ok: {} methods x {} seeds, {} tasks",
                cfg.experiment.methods.len(),
                cfg.experiment.seeds.len(),
                cfg.experiment.tasks
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { model, profile, out } => {
            let (snap, buffer) =
                load_snapshot(&model).with_context(|| format!("cannot load snapshot {}", model.display()))?;
            println!(
                "# {} seed {}: {} tasks, {} classes seen, buffer {}/{}",
                snap.method,
                snap.seed,
                snap.tasks_trained,
                snap.seen_classes.len(),
                buffer.len(),
                buffer.capacity()
            );
            if !profile {
                return Ok(ExitCode::SUCCESS);
            }
            let Some(p) = snapshot_profile(&snap, &buffer)? else {
                bail!("no profile: needs at least two trained tasks and buffered old-class samples");
            };
            eprintln!("old-class mean {:.6e}, new-class mean {:.6e}", p.old_mean, p.new_mean);
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(&path)?);
                    p.write_csv(&mut w)?;
                    w.flush()?;
                }
                None => p.write_csv(io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
