use std::collections::BTreeMap;

use super::{LabeledDataset, TaskDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::FeatureExtractor;

const NORM_FLOOR: f64 = 1e-12;

/// Greedy herding over `[n, d]` features.
///
/// Step `k` picks the unchosen row minimising
/// `|| mu - (sum_chosen + x) / (k + 1) ||`, where `mu` is the mean of all rows.
/// Ties go to the lowest row index. Returns `min(budget, n)` indices in pick order.
pub fn herding_select(features: &Tensor, budget: usize) -> Vec<usize> {
    let n = features.rows();
    let d = features.row_len();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut chosen = Vec::with_capacity(budget.min(n));
    let mut taken = vec![false; n];
    let mut running = vec![0.0; d];
    for k in 0..budget.min(n) {
        let denom = (k + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            let dist = features
                .row(j)
                .iter()
                .zip(&running)
                .zip(&mean)
                .map(|((x, s), m)| {
                    let diff = m - (s + x) / denom;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        let (j, _) = best.expect("candidates remain");
        taken[j] = true;
        for (s, x) in running.iter_mut().zip(features.row(j)) {
            *s += x;
        }
        chosen.push(j);
    }
    chosen
}

/// Row-wise L2 normalisation with a norm floor.
pub fn normalize_rows(t: &Tensor) -> Tensor {
    let cols = t.row_len();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    /// Row of the task dataset this exemplar was copied from.
    pub source_index: usize,
    pub sample: Vec<f64>,
}

/// Replay set with a fixed per-class budget.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    budget_per_class: usize,
    entries: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(budget_per_class: usize) -> Self {
        Self {
            budget_per_class,
            entries: BTreeMap::new(),
        }
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self, class: usize) -> Option<&[Exemplar]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    /// Total stored exemplars.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Herds exemplars for every class of `task` not already in memory, using
    /// L2-normalised features from `extractor`. Existing classes are untouched.
    pub fn update(&mut self, task: &TaskDataset, extractor: &FeatureExtractor) -> Result<()> {
        for &class in &task.classes {
            if self.entries.contains_key(&class) {
                continue;
            }
            let indices = task.data.class_indices(class);
            if indices.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            let (batch, _) = task.data.batch(&indices);
            let feats = normalize_rows(&extractor.features(&batch)?);
            let picks = herding_select(&feats, self.budget_per_class);
            let exemplars = picks
                .into_iter()
                .map(|p| Exemplar {
                    source_index: indices[p],
                    sample: task.data.sample(indices[p]).to_vec(),
                })
                .collect();
            self.entries.insert(class, exemplars);
        }
        Ok(())
    }
}

/// `D^t ∪ E` with per-class counts over the combined pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPool {
    pub data: LabeledDataset,
    pub counts: BTreeMap<usize, usize>,
}

/// Concatenates the task data with every stored exemplar (class order, pick order).
pub fn training_pool(task: &TaskDataset, memory: &ExemplarMemory) -> Result<TrainingPool> {
    let base = &task.data;
    let mut shape = base.samples().shape().to_vec();
    let mut data = base.samples().data().to_vec();
    let mut labels = base.labels().to_vec();
    for (&class, list) in &memory.entries {
        for ex in list {
            data.extend_from_slice(&ex.sample);
            labels.push(class);
        }
    }
    shape[0] = labels.len();
    let mut counts = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let class_count = labels.iter().max().map_or(base.class_count(), |&m| base.class_count().max(m + 1));
    Ok(TrainingPool {
        data: LabeledDataset::new(Tensor::new(shape, data)?, labels, class_count)?,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_tasks;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn budget_beyond_class_size_returns_everything() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let mut picks = herding_select(&f, 10);
        assert_eq!(picks.len(), 3);
        // The middle sample sits exactly on the mean.
        assert_eq!(picks[0], 2);
        picks.sort_unstable();
        assert_eq!(picks, vec![0, 1, 2]);
    }

    #[test]
    fn identical_features_follow_index_order() {
        let f = Tensor::from_rows(&vec![vec![0.3, -0.7]; 5]).unwrap();
        assert_eq!(herding_select(&f, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn pool_counts_include_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 24;
        let samples = Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let ds = LabeledDataset::new(samples, labels, 4).unwrap();
        let tasks = split_tasks(&ds, 2).unwrap();
        let ex = FeatureExtractor::mlp(3, &[5], 4, &mut rng).unwrap();

        let mut mem = ExemplarMemory::new(2);
        let first = training_pool(&tasks[0], &mem).unwrap();
        assert_eq!(first.data, tasks[0].data);

        mem.update(&tasks[0], &ex).unwrap();
        assert_eq!(mem.len(), 4);
        let again = {
            let mut m = mem.clone();
            m.update(&tasks[0], &ex).unwrap();
            m
        };
        assert_eq!(again, mem);

        let pool = training_pool(&tasks[1], &mem).unwrap();
        assert_eq!(pool.data.len(), tasks[1].len() + mem.len());
        assert_eq!(pool.counts[&0], 2);
        assert_eq!(pool.counts[&1], 2);
        assert_eq!(pool.counts[&2], 6);
    }
}
