//! Runs the ablation grid on the synthetic reference benchmark for a few seeds.
//!
//! `cargo run --release --example ablation -- 3` (seed count, default 1)

use std::time::Instant;

use tae::config::ExperimentConfig;
use tae::experiment::ablate;

fn main() -> tae::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    for seed in 0..seeds {
        let start = Instant::now();
        let cfg = ExperimentConfig::reference(seed, std::env::temp_dir().join(format!("tae-ablation-{seed}")));
        let report = ablate(&cfg, false)?;
        println!("seed {seed} ({:.1}s)", start.elapsed().as_secs_f64());
        for r in report.rows.iter().chain([&report.control]) {
            println!("  {:<9} avg {:.4} last {:.4}", r.name, r.avg, r.last);
        }
    }
    Ok(())
}
