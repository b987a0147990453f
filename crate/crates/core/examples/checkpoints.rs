//! Saves a trained model, centroid bank, and archive, then restores them.

use tae::centroid::CentroidBank;
use tae::config::ExperimentConfig;
use tae::experiment::execute;
use tae::models::load_checkpoint;
use tae::trainer::ExpansionArchive;

fn main() -> tae::Result<()> {
    let dir = std::env::temp_dir().join("tae-checkpoints");
    let mut cfg = ExperimentConfig::reference(1, &dir);
    cfg.train.epochs = 5;
    cfg.train.schedule.milestones = vec![3];
    let outcome = execute(&cfg, Some(&dir))?;

    let (ex, head) = load_checkpoint(&dir.join("checkpoints/task_5.model"))?;
    assert_eq!(&ex, outcome.engine.extractor());
    assert_eq!(&head, outcome.engine.head());
    let bank = CentroidBank::load(&dir.join("checkpoints/task_5.bank"), ex.feature_dim())?;
    let archive = ExpansionArchive::load(&dir.join("archive.bin"))?;
    println!(
        "restored {} extractor scalars, {} classes, {} centroids, {} archived deltas",
        ex.store().num_scalars(),
        head.num_classes(),
        bank.len(),
        archive.deltas.len()
    );
    Ok(())
}
