//! Runs a config file and prints the per-method summary.
//!
//! ```text
//! cargo run --release -p ocl-lab --example grid -- configs/desk.toml
//! ```

use ocl_lab::experiment::{parse_config, run_grid, threads_from_env};
use ocl_lab::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).ok_or("usage: grid <config.toml>")?;
    let cfg = parse_config(&path)?;
    let report = run_grid(&cfg, Execution::Parallel, threads_from_env())?;
    for (method, s) in &report.summary().methods {
        println!(
            "{method:<18} A_T {:.4} ± {:.4}  F_T {:.4}",
            s.mean_at,
            s.ci95_at.unwrap_or(0.0),
            s.mean_ft.unwrap_or(f64::NAN)
        );
    }
    for r in &report.runs {
        let last = r.matrix.rows().last().map(|row| row[0]).unwrap_or(f64::NAN);
        print!(
            "{:<18} seed {} A_T {:.4} a_T1 {:.4}",
            r.method.name(),
            r.seed,
            r.final_accuracy,
            last
        );
        match &r.profile {
            Some(p) => println!(" profile old {:.5} new {:.5}", p.old_mean, p.new_mean),
            None => println!(),
        }
    }
    Ok(())
}
