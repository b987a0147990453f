//! Ranks extractor scalars by accumulated gradient magnitude and selects the top p.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tae::data::{split_tasks, SyntheticSpec};
use tae::models::{ClassifierHead, FeatureExtractor};
use tae::sensitivity::{accumulate_sensitivity, select_top_p, write_report_csv, SensitivityOptions};

fn main() -> tae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = SyntheticSpec { classes: 4, per_class: 20, test_per_class: 1, dims: vec![5], radius: 2.0, sigma: 1.0, seed: 2 };
    let task = split_tasks(&spec.generate()?.train, 1)?.remove(0);
    let ex = FeatureExtractor::mlp(5, &[6], 4, &mut rng)?;
    let mut head = ClassifierHead::new(4);
    head.grow(&task.classes, &mut rng)?;

    let opts = SensitivityOptions { passes: 2, ..Default::default() };
    let report = accumulate_sensitivity(&ex, &head, &task, &opts)?;
    for p in [0.05, 0.1, 0.2, 0.3] {
        let mask = select_top_p(&report, p)?;
        println!("p={p}: {} of {} scalars trainable", mask.count(), mask.len());
    }
    let mut csv = Vec::new();
    write_report_csv(&report, ex.store(), &mut csv)?;
    for line in String::from_utf8_lossy(&csv).lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
