//! Runs the reference benchmark into a run directory, then re-renders the report.
//!
//! `cargo run --release --example run_experiment -- [out_dir]`

use tae::config::ExperimentConfig;
use tae::experiment::{render_report, run_experiment};

fn main() -> tae::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("tae-run").display().to_string());
    let cfg = ExperimentConfig::reference(0, &out);
    let outcome = run_experiment(&cfg)?;
    print!("{}", outcome.matrix.to_csv());
    let e = &outcome.report.expansion;
    println!("stored scalars {} (closed form {})", e.cumulative, e.closed_form);
    render_report(cfg.output.dir.as_path())?;
    println!("wrote {}", cfg.output.dir.display());
    Ok(())
}
