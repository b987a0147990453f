use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Long-tail protocol: head size, imbalance ratio, and memory budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtProtocol {
    pub rho: f64,
    pub head_count: usize,
    pub memory_per_class: usize,
    pub shuffled: bool,
    pub seed: u64,
}

impl LtProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if (self.head_count as f64) * self.rho < 1.0 {
            return Err(Error::Config(format!(
                "head_count * rho must be >= 1 (head_count {}, rho {})",
                self.head_count, self.rho
            )));
        }
        if self.memory_per_class == 0 {
            return Err(Error::Config("memory_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sample quota per sorted position: `round(head * rho^(i / (C - 1)))`.
pub fn long_tail_counts(classes: usize, head_count: usize, rho: f64) -> Vec<usize> {
    if classes == 1 {
        return vec![head_count];
    }
    (0..classes)
        .map(|i| {
            let exponent = i as f64 / (classes - 1) as f64;
            (head_count as f64 * rho.powf(exponent)).round() as usize
        })
        .collect()
}

/// Position -> class label. Identity unless `shuffled`.
pub fn class_permutation(classes: usize, shuffled: bool, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..classes).collect();
    if shuffled {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    perm
}

/// Sample quota indexed by class label.
pub fn class_quotas(classes: usize, proto: &LtProtocol) -> Vec<usize> {
    let counts = long_tail_counts(classes, proto.head_count, proto.rho);
    let perm = class_permutation(classes, proto.shuffled, proto.seed);
    let mut quotas = vec![0; classes];
    for (pos, &label) in perm.iter().enumerate() {
        quotas[label] = counts[pos];
    }
    quotas
}

/// Keeps the first `quota[c]` samples (dataset order) of every class `c`.
pub fn make_long_tailed(ds: &LabeledDataset, proto: &LtProtocol) -> Result<LabeledDataset> {
    proto.validate()?;
    let quotas = class_quotas(ds.class_count(), proto);
    let available = ds.class_counts();
    for (class, (&needed, &have)) in quotas.iter().zip(&available).enumerate() {
        if have < needed {
            return Err(Error::InsufficientSamples {
                class,
                needed,
                available: have,
            });
        }
    }
    let mut taken = vec![0; ds.class_count()];
    let keep: Vec<usize> = ds
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            (taken[l] < quotas[l]).then(|| {
                taken[l] += 1;
                i
            })
        })
        .collect();
    ds.subset(&keep)
}

/// One incremental task: its label set and its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    /// 1-based task index.
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub data: LabeledDataset,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Splits classes into `steps` equal tasks in label order. Combined with a
/// shuffled long-tail quota this scatters head and tail classes across tasks.
pub fn split_tasks(ds: &LabeledDataset, steps: usize) -> Result<Vec<TaskDataset>> {
    let c = ds.class_count();
    if steps == 0 || !c.is_multiple_of(steps) {
        return Err(Error::UnevenSplit { classes: c, steps });
    }
    let per_task = c / steps;
    (0..steps)
        .map(|t| {
            let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
            let indices: Vec<usize> = ds
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, l)| classes.contains(l))
                .map(|(i, _)| i)
                .collect();
            if let Some(&empty) = classes.iter().find(|&&k| !ds.labels().contains(&k)) {
                return Err(Error::EmptyClass(empty));
            }
            Ok(TaskDataset {
                task_id: t + 1,
                classes,
                data: ds.subset(&indices)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn proto(rho: f64, head: usize, shuffled: bool, seed: u64) -> LtProtocol {
        LtProtocol {
            rho,
            head_count: head,
            memory_per_class: 20,
            shuffled,
            seed,
        }
    }

    fn balanced(classes: usize, per_class: usize) -> LabeledDataset {
        let n = classes * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let samples = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledDataset::new(samples, labels, classes).unwrap()
    }

    #[test]
    fn cifar_endpoints() {
        let c = long_tail_counts(100, 500, 0.1);
        assert_eq!((c[0], c[99]), (500, 50));
    }

    #[test]
    fn ten_class_profile() {
        // round(100 * 0.1^(i/9)) evaluated by hand
        assert_eq!(long_tail_counts(10, 100, 0.1), vec![100, 77, 60, 46, 36, 28, 22, 17, 13, 10]);
    }

    #[test]
    fn balanced_limit() {
        assert!(long_tail_counts(7, 40, 1.0).iter().all(|&n| n == 40));
    }

    #[test]
    fn unshuffled_positions_follow_labels() {
        let ds = balanced(10, 100);
        let lt = make_long_tailed(&ds, &proto(0.1, 100, false, 0)).unwrap();
        assert_eq!(lt.class_counts(), long_tail_counts(10, 100, 0.1));
    }

    #[test]
    fn shuffled_is_seed_deterministic_permutation() {
        let ds = balanced(10, 100);
        let a = make_long_tailed(&ds, &proto(0.1, 100, true, 3)).unwrap();
        let b = make_long_tailed(&ds, &proto(0.1, 100, true, 3)).unwrap();
        assert_eq!(a, b);
        let mut counts = a.class_counts();
        counts.sort_unstable_by(|x, y| y.cmp(x));
        assert_eq!(counts, long_tail_counts(10, 100, 0.1));
        assert_ne!(a.class_counts(), long_tail_counts(10, 100, 0.1));
    }

    #[test]
    fn deficit_is_reported() {
        let ds = balanced(4, 30);
        match make_long_tailed(&ds, &proto(0.5, 40, false, 0)) {
            Err(Error::InsufficientSamples { class: 0, needed: 40, available: 30 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_into_disjoint_tasks() {
        let ds = balanced(100, 2);
        let tasks = split_tasks(&ds, 10).unwrap();
        assert_eq!(tasks.len(), 10);
        assert!(tasks.iter().all(|t| t.classes.len() == 10 && t.len() == 20));
        let single = split_tasks(&ds, 1).unwrap();
        assert_eq!(single[0].data, ds);
        assert!(matches!(split_tasks(&ds, 3), Err(Error::UnevenSplit { .. })));
    }

    #[test]
    fn invalid_protocols() {
        assert!(proto(0.0, 10, false, 0).validate().is_err());
        assert!(proto(0.05, 10, false, 0).validate().is_err());
        let mut p = proto(0.1, 500, true, 0);
        p.memory_per_class = 0;
        assert!(p.validate().is_err());
    }
}
