//! Drives the engine task by task and reports how much of the extractor each task touched.

use tae::config::ExperimentConfig;
use tae::experiment::{build_extractor, prepare_data};
use tae::trainer::{predict_all, Engine};

fn main() -> tae::Result<()> {
    let cfg = ExperimentConfig::reference(0, "unused");
    let data = prepare_data(&cfg)?;
    let mut engine = Engine::new(cfg.trainer_config(), build_extractor(&cfg, &data.input_shape)?)?;
    for task in &data.train_tasks {
        let before = engine.extractor().store().flat_values();
        let s = engine.train_task(task)?;
        let after = engine.extractor().store().flat_values();
        let moved = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        let (per_task, overall) = predict_all(&engine, &data.eval_tasks)?;
        println!(
            "task {}: trained {}/{} extractor scalars ({} moved), pool {}, acc {:?}, overall {:.3}",
            s.task_id,
            s.trained_extractor_scalars,
            s.extractor_scalars,
            moved,
            s.pool_size,
            per_task.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            overall
        );
    }
    println!("archive holds {} scalars", engine.archive().cumulative_count());
    Ok(())
}
