//! Accuracy and stored parameters across the canonical p values.

use tae::config::ExperimentConfig;
use tae::experiment::{sweep_csv, sweep_p};

fn main() -> tae::Result<()> {
    let cfg = ExperimentConfig::reference(0, std::env::temp_dir().join("tae-sweep"));
    print!("{}", sweep_csv(&sweep_p(&cfg, false)?));
    Ok(())
}
