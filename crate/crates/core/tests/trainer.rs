mod common;

use tae::autodiff::Tensor;
use tae::config::ExperimentConfig;
use tae::data::{split_tasks, LabeledDataset, SyntheticSpec, TaskDataset};
use tae::experiment::{build_extractor, execute, prepare_data};
use tae::trainer::{predict_all, Engine, ExpansionArchive, Method, TrainerConfig};
use tae::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference(seed, "unused");
    if let tae::config::DatasetConfig::Synthetic(s) = &mut cfg.dataset {
        s.classes = 6;
        s.per_class = 40;
        s.test_per_class = 10;
        s.dims = vec![8];
    }
    cfg.protocol.head_count = 40;
    cfg.protocol.memory_per_class = 4;
    cfg.tasks.steps = 3;
    cfg.model.hidden = vec![12];
    cfg.model.feature_dim = 8;
    cfg.train.epochs = 6;
    cfg.train.schedule.milestones = vec![4];
    cfg
}

fn engine_for(cfg: &ExperimentConfig) -> (Engine, Vec<TaskDataset>, Vec<TaskDataset>) {
    let data = prepare_data(cfg).unwrap();
    let ex = build_extractor(cfg, &data.input_shape).unwrap();
    (Engine::new(cfg.trainer_config(), ex).unwrap(), data.train_tasks, data.eval_tasks)
}

#[test]
fn frozen_scalars_are_bit_identical() {
    let cfg = small(1);
    let (mut engine, tasks, _) = engine_for(&cfg);
    engine.train_task(&tasks[0]).unwrap();
    for task in &tasks[1..] {
        let before = engine.extractor().store().flat_values();
        engine.train_task(task).unwrap();
        let after = engine.extractor().store().flat_values();
        let mask = &engine.last_plan().unwrap().mask;
        let n = before.len();
        assert_eq!(mask.count(), tae::sensitivity::selection_count(cfg.tae.p, n));
        let mut changed = 0;
        for i in 0..n {
            if !mask.get(i) {
                assert_eq!(before[i].to_bits(), after[i].to_bits(), "scalar {i} moved while frozen");
            } else if before[i] != after[i] {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn archive_matches_closed_form() {
    let cfg = small(2);
    let o = execute(&cfg, None).unwrap();
    let a = o.engine.archive();
    assert_eq!(a.cumulative_count(), ExpansionArchive::closed_form(cfg.tae.p, a.extractor_scalars, a.head_scalars, 3));
    assert_eq!(o.report.expansion.cumulative, o.report.expansion.closed_form);
}

#[test]
fn out_of_order_task_is_rejected() {
    let cfg = small(3);
    let (mut engine, tasks, _) = engine_for(&cfg);
    assert!(matches!(
        engine.train_task(&tasks[1]),
        Err(Error::OutOfOrderTask { expected: 1, got: 2 })
    ));
    assert_eq!(engine.tasks_done(), 0);
}

#[test]
fn diverging_task_rolls_back() {
    let cfg = small(4);
    let data = prepare_data(&cfg).unwrap();
    let ex = build_extractor(&cfg, &data.input_shape).unwrap();
    let mut hot = cfg.trainer_config();
    hot.schedule.base_lr = 1e200;
    let mut engine = Engine::new(hot, ex.clone()).unwrap();
    assert!(engine.train_task(&data.train_tasks[0]).is_err());
    assert_eq!(engine.tasks_done(), 0);
    assert_eq!(engine.extractor(), &ex);
    assert_eq!(engine.head().num_classes(), 0);
    assert!(engine.bank().is_empty());
    assert!(engine.memory().is_empty());
    assert!(engine.archive().deltas.is_empty());
}

#[test]
fn rollback_preserves_every_scalar() {
    let cfg = small(5);
    let (mut engine, tasks, _) = engine_for(&cfg);
    engine.train_task(&tasks[0]).unwrap();
    let ex_before = engine.extractor().clone();
    let head_before = engine.head().clone();
    let bank_before = engine.bank().clone();
    // Task 2 with a class that is already in the head fails inside train_task.
    let mut bad = tasks[1].clone();
    bad.classes[0] = tasks[0].classes[0];
    assert!(engine.train_task(&bad).is_err());
    assert_eq!(engine.extractor(), &ex_before);
    assert_eq!(engine.head(), &head_before);
    assert_eq!(engine.bank(), &bank_before);
    assert_eq!(engine.tasks_done(), 1);
}

fn two_blobs() -> TaskDataset {
    let spec = SyntheticSpec {
        classes: 2,
        per_class: 60,
        test_per_class: 10,
        dims: vec![4],
        radius: 4.0,
        sigma: 0.3,
        seed: 9,
    };
    split_tasks(&spec.generate().unwrap().train, 1).unwrap().remove(0)
}

#[test]
fn separable_first_task_is_learned() {
    let task = two_blobs();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let ex = tae::models::FeatureExtractor::mlp(4, &[8], 4, &mut rng).unwrap();
    let cfg = TrainerConfig {
        epochs: 10,
        schedule: tae::trainer::LrSchedule { base_lr: 0.05, milestones: vec![], factor: 0.1 },
        ..TrainerConfig::default()
    };
    let mut engine = Engine::new(cfg, ex).unwrap();
    engine.train_task(&task).unwrap();
    assert!(engine.accuracy(&task.data).unwrap() >= 0.95);
}

#[test]
fn memorized_tiny_task_scores_one() {
    let samples = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]).unwrap();
    let ds = LabeledDataset::new(samples, vec![0, 1, 2, 3], 4).unwrap();
    let task = split_tasks(&ds, 1).unwrap().remove(0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let ex = tae::models::FeatureExtractor::mlp(2, &[16], 8, &mut rng).unwrap();
    let cfg = TrainerConfig {
        epochs: 60,
        batch_size: 4,
        memory_per_class: 1,
        schedule: tae::trainer::LrSchedule { base_lr: 0.05, milestones: vec![], factor: 0.1 },
        ..TrainerConfig::default()
    };
    let mut engine = Engine::new(cfg, ex).unwrap();
    engine.train_task(&task).unwrap();
    let (per_task, overall) = predict_all(&engine, &[task]).unwrap();
    assert_eq!(per_task, vec![1.0]);
    assert_eq!(overall, 1.0);
}

#[test]
fn random_model_is_near_chance() {
    // Every class shares one distribution, so predictions carry no label
    // information and accuracy on 1000 balanced samples is binomial around 0.1.
    let spec = SyntheticSpec {
        classes: 10,
        per_class: 100,
        test_per_class: 1,
        dims: vec![6],
        radius: 1e-9,
        sigma: 1.0,
        seed: 4,
    };
    let ds = spec.generate().unwrap().train;
    let task = split_tasks(&ds, 1).unwrap().remove(0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    let ex = tae::models::FeatureExtractor::mlp(6, &[8], 4, &mut rng).unwrap();
    let mut head = tae::models::ClassifierHead::new(4);
    head.grow(&task.classes, &mut rng).unwrap();
    // Evaluate through the public pieces so no training happens.
    let logits = head.predict(&ex.features(ds.samples()).unwrap()).unwrap();
    let correct = logits
        .argmax_rows()
        .iter()
        .zip(ds.labels())
        .filter(|(c, y)| head.classes()[**c] == **y)
        .count();
    let acc = correct as f64 / ds.len() as f64;
    let sigma = (0.1f64 * 0.9 / ds.len() as f64).sqrt();
    assert!((acc - 0.1).abs() <= 3.0 * sigma, "acc {acc}");
}

#[test]
fn accuracies_are_bounded_and_runs_are_deterministic() {
    let cfg = small(6);
    let a = execute(&cfg, None).unwrap();
    let b = execute(&cfg, None).unwrap();
    assert_eq!(a.matrix, b.matrix);
    for s in 1..=3 {
        assert!(a.matrix.row(s).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn finetune_trains_everything_without_memory() {
    let mut cfg = small(7);
    cfg.tae.method = Method::Finetune;
    let o = execute(&cfg, None).unwrap();
    assert!(o.engine.memory().is_empty());
    let n = o.engine.archive().extractor_scalars;
    assert!(o.report.expansion.per_task_trained.iter().all(|&k| k == n));
}

#[test]
fn balanced_protocol_is_not_harder_than_long_tailed() {
    let mut wins = 0;
    for seed in 0..5 {
        let lt = small(seed);
        let mut bal = lt.clone();
        bal.protocol.rho = 1.0;
        if execute(&bal, None).unwrap().avg() >= execute(&lt, None).unwrap().avg() {
            wins += 1;
        }
    }
    assert!(wins >= 3, "balanced won {wins}/5");
}
