use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tae::config::ExperimentConfig;
use tae::data::SyntheticSpec;
use tae::experiment::{ablate, gen_data, render_report, run_experiment, sweep_csv, sweep_p};

#[derive(Parser)]
#[command(name = "tae", version, about = "Long-tailed class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic Gaussian-blob train/test files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        /// Sample shape, e.g. `32` or `1,8,8`.
        #[arg(long, value_delimiter = ',', default_value = "32")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the configured task stream and write the run directory.
    Run {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Base / +reweight / +reweight+centroid grid plus a fine-tune control.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value in `tae.sweep`.
    SweepP {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render curve.svg and print the table from a run's metrics.csv.
    Report { run_dir: PathBuf },
}

fn load(path: &Path, out: Option<PathBuf>) -> tae::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            classes,
            per_class,
            test_per_class,
            dims,
            radius,
            sigma,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                test_per_class,
                dims,
                radius,
                sigma,
                seed,
            };
            gen_data(&spec, &out).map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
        }
        Command::Run { config, out } => load(&config, out).and_then(|cfg| {
            let o = run_experiment(&cfg)?;
            print!("{}", o.matrix.to_csv());
            println!("avg {:.4} last {:.4} -> {}", o.avg(), o.last(), cfg.output.dir.display());
            Ok(())
        }),
        Command::Ablate { config, out } => load(&config, out).and_then(|cfg| {
            print!("{}", ablate(&cfg, true)?.to_csv());
            Ok(())
        }),
        Command::SweepP { config, out } => load(&config, out).and_then(|cfg| {
            print!("{}", sweep_csv(&sweep_p(&cfg, true)?));
            Ok(())
        }),
        Command::Report { run_dir } => render_report(&run_dir).map(|m| print!("{}", m.to_csv())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
