//! Applies the long-tail quotas to a balanced set and splits it into tasks.

use tae::data::{class_permutation, long_tail_counts, make_long_tailed, split_tasks, LtProtocol, SyntheticSpec};

fn main() -> tae::Result<()> {
    println!("C=10, head=100, rho=0.1: {:?}", long_tail_counts(10, 100, 0.1));

    let spec = SyntheticSpec { classes: 10, per_class: 100, test_per_class: 1, dims: vec![4], radius: 2.0, sigma: 1.0, seed: 0 };
    let proto = LtProtocol { rho: 0.1, head_count: 100, memory_per_class: 5, shuffled: true, seed: 3 };
    println!("shuffled order: {:?}", class_permutation(10, true, proto.seed));

    let lt = make_long_tailed(&spec.generate()?.train, &proto)?;
    println!("per-class counts after quotas: {:?}", lt.class_counts());
    for task in split_tasks(&lt, 5)? {
        let counts: Vec<usize> = task.classes.iter().map(|&c| lt.class_counts()[c]).collect();
        println!("task {}: classes {:?} counts {:?}", task.task_id, task.classes, counts);
    }
    Ok(())
}
