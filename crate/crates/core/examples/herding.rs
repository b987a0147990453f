//! Herding exemplar selection and the per-class memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tae::autodiff::Tensor;
use tae::data::{herding_select, normalize_rows, split_tasks, training_pool, ExemplarMemory, SyntheticSpec};
use tae::models::FeatureExtractor;

fn main() -> tae::Result<()> {
    let feats = normalize_rows(&Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.9, 0.1],
        vec![0.0, 1.0],
        vec![0.6, 0.8],
        vec![0.7, 0.7],
    ])?);
    println!("herding order (budget 3): {:?}", herding_select(&feats, 3));

    let spec = SyntheticSpec { classes: 4, per_class: 30, test_per_class: 1, dims: vec![6], radius: 3.0, sigma: 1.0, seed: 1 };
    let tasks = split_tasks(&spec.generate()?.train, 2)?;
    let ex = FeatureExtractor::mlp(6, &[16], 8, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut memory = ExemplarMemory::new(5);
    memory.update(&tasks[0], &ex)?;
    for c in memory.classes() {
        let picks: Vec<usize> = memory.entries(c).unwrap().iter().map(|e| e.source_index).collect();
        println!("class {c}: exemplars {picks:?}");
    }
    let pool = training_pool(&tasks[1], &memory)?;
    println!("task 2 pool: {} samples, counts {:?}", pool.data.len(), pool.counts);
    Ok(())
}
