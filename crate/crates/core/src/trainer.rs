//! Incremental training loop.
//!
//! Per task: grow the head, pick the trainable extractor scalars (all of them
//! on the first task, otherwise the top-p most sensitive), seed the new
//! centroids, train on `D^t ∪ E` under the combined loss, herd exemplars for
//! the new classes, and archive the sparse delta of the trained scalars.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tape, TrainableMask, Var};
use crate::binio::{self, Reader};
use crate::centroid::{max_loss, min_loss, BankBinding, CentroidBank, MaxScope};
use crate::data::{training_pool, ExemplarMemory, LabeledDataset, TaskDataset};
use crate::error::{Error, Result};
use crate::models::{ClassifierHead, FeatureExtractor};
use crate::rebalance::{effective_weights, weighted_ce, ReweightConfig};
use crate::sensitivity::{accumulate_sensitivity, select_top_p, selection_count, SensitivityOptions};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TAEA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 0.5,
            gamma3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma1, self.gamma2, self.gamma3];
        if all.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|g| *g == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_centroids(&self) -> bool {
        self.gamma2 > 0.0 || self.gamma3 > 0.0
    }
}

/// Training regime. `Tae` is the masked expansion method; the other two are controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Tae,
    /// Every scalar trainable, no exemplar memory.
    Finetune,
    /// Every scalar trainable, with exemplar replay.
    Replay,
}

impl Method {
    fn uses_memory(self) -> bool {
        !matches!(self, Method::Finetune)
    }
}

/// Step decay: `lr * factor^(number of milestones <= epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

/// Reference schedule: 170 epochs, x0.1 at 80, 120, 150.
pub const REFERENCE_EPOCHS: usize = 170;
pub const REFERENCE_MILESTONES: [usize; 3] = [80, 120, 150];

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.factor.powi(drops as i32)
    }

    /// The reference schedule with every epoch count scaled by `scale`.
    /// `scale = 0.235` gives 40 epochs with drops at 19, 28, 35.
    pub fn scaled_reference(base_lr: f64, scale: f64) -> (usize, Self) {
        let epochs = ((REFERENCE_EPOCHS as f64 * scale).round() as usize).max(1);
        let milestones = REFERENCE_MILESTONES
            .iter()
            .map(|&m| (m as f64 * scale).round() as usize)
            .collect();
        (
            epochs,
            Self {
                base_lr,
                milestones,
                factor: 0.1,
            },
        )
    }

    /// `(epoch, lr)` pairs at which the rate changes, starting at epoch 0.
    pub fn plan(&self, epochs: usize) -> Vec<(usize, f64)> {
        let mut out = vec![(0, self.base_lr)];
        for &m in &self.milestones {
            if m > 0 && m < epochs {
                out.push((m, self.lr_at(m)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub method: Method,
    /// Fraction of extractor scalars trained per task after the first.
    pub p: f64,
    pub sensitivity_passes: usize,
    pub signed_accumulation: bool,
    pub max_scope: MaxScope,
    pub gammas: LossWeights,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub memory_per_class: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let (epochs, schedule) = LrSchedule::scaled_reference(0.1, 0.235);
        Self {
            method: Method::Tae,
            p: 0.1,
            sensitivity_passes: 1,
            signed_accumulation: false,
            max_scope: MaxScope::AllSeen,
            gammas: LossWeights::default(),
            beta: 0.95,
            epochs,
            batch_size: 32,
            schedule,
            momentum: 0.9,
            seed: 0,
            memory_per_class: 20,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.gammas.validate()?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p must be in (0, 1], got {}", self.p)));
        }
        if self.sensitivity_passes == 0 {
            return Err(Error::Config("Z must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.schedule.base_lr > 0.0) || !(self.schedule.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be > 0".into()));
        }
        if self.schedule.milestones.windows(2).any(|w| w[0] >= w[1])
            || self.schedule.milestones.iter().any(|&m| m >= self.epochs)
        {
            return Err(Error::Config(format!(
                "schedule milestones {:?} must be strictly increasing and below {} epochs",
                self.schedule.milestones, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.memory_per_class == 0 {
            return Err(Error::Config("memory_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// What one task trains.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPlan {
    pub task_id: usize,
    pub mask: TrainableMask,
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDelta {
    pub task_id: usize,
    /// `(flat_index, value)` of every extractor scalar trained in the task.
    pub entries: Vec<(usize, f64)>,
}

/// Sparse per-task deltas of the extractor plus head-size accounting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpansionArchive {
    pub extractor_scalars: usize,
    pub head_scalars: usize,
    pub deltas: Vec<TaskDelta>,
}

impl ExpansionArchive {
    /// Stored extractor scalars across tasks plus the current head size.
    pub fn cumulative_count(&self) -> usize {
        self.deltas.iter().map(|d| d.entries.len()).sum::<usize>() + self.head_scalars
    }

    /// `N_head + N_extractor + (tasks - 1) * ceil(p * N_extractor)`.
    pub fn closed_form(p: f64, extractor_scalars: usize, head_scalars: usize, tasks: usize) -> usize {
        if tasks == 0 {
            return head_scalars;
        }
        head_scalars + extractor_scalars + (tasks - 1) * selection_count(p, extractor_scalars)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        binio::put_u32(&mut out, self.extractor_scalars);
        binio::put_u32(&mut out, self.head_scalars);
        binio::put_u32(&mut out, self.deltas.len());
        for d in &self.deltas {
            binio::put_u32(&mut out, d.task_id);
            binio::put_u32(&mut out, d.entries.len());
            for &(i, v) in &d.entries {
                binio::put_u32(&mut out, i);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(ARCHIVE_MAGIC)?;
        r.version(ARCHIVE_VERSION)?;
        let extractor_scalars = r.u32("extractor scalars")? as usize;
        let head_scalars = r.u32("head scalars")? as usize;
        let tasks = r.u32("task count")? as usize;
        let mut deltas = Vec::with_capacity(tasks);
        for _ in 0..tasks {
            let task_id = r.u32("task id")? as usize;
            let n = r.u32("entry count")? as usize;
            let mut entries = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let i = r.u32("entry index")? as usize;
                entries.push((i, r.f64("entry value")?));
            }
            deltas.push(TaskDelta { task_id, entries });
        }
        r.finish()?;
        Ok(Self {
            extractor_scalars,
            head_scalars,
            deltas,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &binio::read_file(path)?)
    }
}

/// Tape handles for the pieces of the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Var,
    pub min: Option<Var>,
    pub max: Option<Var>,
    pub total: Var,
}

/// Centroid terms of the combined loss.
pub struct CentroidTerms<'a> {
    pub bank: &'a BankBinding,
    pub scope: MaxScope,
    pub current: &'a [usize],
}

/// `gamma1 * weighted_ce + gamma2 * min_loss + gamma3 * max_loss`.
/// Terms with a zero weight are not recorded.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    features: Var,
    logits: Var,
    labels: &[usize],
    columns: &[usize],
    weights: &ReweightConfig,
    gammas: &LossWeights,
    centroids: Option<CentroidTerms<'_>>,
) -> Result<LossParts> {
    let ce = weighted_ce(tape, logits, labels, columns, weights)?;
    let mut total = tape.scale(ce, gammas.gamma1);
    let (mut min, mut max) = (None, None);
    if let Some(c) = centroids {
        if gammas.gamma2 > 0.0 {
            let m = min_loss(tape, features, labels, c.bank)?;
            let s = tape.scale(m, gammas.gamma2);
            total = tape.add(total, s)?;
            min = Some(m);
        }
        if gammas.gamma3 > 0.0 {
            let m = max_loss(tape, c.bank, c.scope, c.current)?;
            let s = tape.scale(m, gammas.gamma3);
            total = tape.add(total, s)?;
            max = Some(m);
        }
    }
    Ok(LossParts { ce, min, max, total })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub trained_extractor_scalars: usize,
    pub extractor_scalars: usize,
    pub head_scalars: usize,
    pub pool_size: usize,
    pub final_epoch_loss: f64,
}

/// Everything carried from one task to the next.
#[derive(Clone, Debug)]
pub struct Engine {
    config: TrainerConfig,
    extractor: FeatureExtractor,
    head: ClassifierHead,
    bank: CentroidBank,
    memory: ExemplarMemory,
    archive: ExpansionArchive,
    extractor_opt: Sgd,
    head_opt: Sgd,
    tasks_done: usize,
    last_plan: Option<TaskPlan>,
}

fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Engine {
    pub fn new(config: TrainerConfig, extractor: FeatureExtractor) -> Result<Self> {
        config.validate()?;
        let d = extractor.feature_dim();
        let n = extractor.store().num_scalars();
        Ok(Self {
            extractor_opt: Sgd::new(config.momentum),
            head_opt: Sgd::new(config.momentum),
            memory: ExemplarMemory::new(config.memory_per_class),
            head: ClassifierHead::new(d),
            bank: CentroidBank::new(d),
            archive: ExpansionArchive {
                extractor_scalars: n,
                ..Default::default()
            },
            config,
            extractor,
            tasks_done: 0,
            last_plan: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn bank(&self) -> &CentroidBank {
        &self.bank
    }

    pub fn memory(&self) -> &ExemplarMemory {
        &self.memory
    }

    pub fn archive(&self) -> &ExpansionArchive {
        &self.archive
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn last_plan(&self) -> Option<&TaskPlan> {
        self.last_plan.as_ref()
    }

    /// Trains one task. On error the engine is left exactly as it was.
    pub fn train_task(&mut self, task: &TaskDataset) -> Result<TaskSummary> {
        let expected = self.tasks_done + 1;
        if task.task_id != expected {
            return Err(Error::OutOfOrderTask {
                expected,
                got: task.task_id,
            });
        }
        let mut next = self.clone();
        let summary = next.run_task(task)?;
        *self = next;
        Ok(summary)
    }

    /// Chooses which extractor scalars the next task trains.
    pub fn plan_mask(&self, task: &TaskDataset) -> Result<TrainableMask> {
        let n = self.extractor.store().num_scalars();
        if task.task_id == 1 || self.config.method != Method::Tae {
            return Ok(TrainableMask::all(n));
        }
        let opts = SensitivityOptions {
            passes: self.config.sensitivity_passes,
            batch_size: self.config.batch_size,
            signed: self.config.signed_accumulation,
        };
        let report = accumulate_sensitivity(&self.extractor, &self.head, task, &opts)?;
        select_top_p(&report, self.config.p)
    }

    fn run_task(&mut self, task: &TaskDataset) -> Result<TaskSummary> {
        let cfg = self.config.clone();
        let mut rng = task_rng(cfg.seed, task.task_id);

        self.head.grow(&task.classes, &mut rng)?;
        let mask = self.plan_mask(task)?;
        self.extractor_opt.zero_frozen(&mask);
        let head_mask = TrainableMask::all(self.head.store().num_scalars());

        let use_centroids = cfg.gammas.uses_centroids();
        if use_centroids {
            self.bank.init_for_task(task, &self.extractor)?;
        }

        let pool = if cfg.method.uses_memory() {
            training_pool(task, &self.memory)?
        } else {
            training_pool(task, &ExemplarMemory::new(cfg.memory_per_class))?
        };
        let weights = effective_weights(&pool.counts, cfg.beta)?;

        let mut order: Vec<usize> = (0..pool.data.len()).collect();
        let mut epoch_loss = 0.0;
        for epoch in 0..cfg.epochs {
            let lr = cfg.schedule.lr_at(epoch);
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let loss = self.train_batch(&pool.data, chunk, task, &mask, &head_mask, &weights, lr, use_centroids)?;
                sum += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            epoch_loss = sum / seen as f64;
        }

        if cfg.method.uses_memory() {
            self.memory.update(task, &self.extractor)?;
        }

        let values = self.extractor.store().flat_values();
        self.archive.deltas.push(TaskDelta {
            task_id: task.task_id,
            entries: mask.selected().map(|i| (i, values[i])).collect(),
        });
        self.archive.head_scalars = self.head.store().num_scalars();
        self.tasks_done = task.task_id;

        let summary = TaskSummary {
            task_id: task.task_id,
            trained_extractor_scalars: mask.count(),
            extractor_scalars: mask.len(),
            head_scalars: self.head.store().num_scalars(),
            pool_size: pool.data.len(),
            final_epoch_loss: epoch_loss,
        };
        self.last_plan = Some(TaskPlan {
            task_id: task.task_id,
            mask,
            schedule: cfg.schedule.plan(cfg.epochs),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
        });
        Ok(summary)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_batch(
        &mut self,
        data: &LabeledDataset,
        chunk: &[usize],
        task: &TaskDataset,
        mask: &TrainableMask,
        head_mask: &TrainableMask,
        weights: &ReweightConfig,
        lr: f64,
        use_centroids: bool,
    ) -> Result<f64> {
        let (batch, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let ex_vars = self.extractor.store().bind(&mut tape);
        let head_vars = self.head.store().bind(&mut tape);
        let binding = if use_centroids { Some(self.bank.bind(&mut tape)?) } else { None };
        let x = tape.constant(batch);
        let f = self.extractor.embed(&mut tape, &ex_vars, x)?;
        let z = self.head.logits(&mut tape, &head_vars, f)?;
        let parts = total_loss(
            &mut tape,
            f,
            z,
            &labels,
            self.head.classes(),
            weights,
            &self.config.gammas,
            binding.as_ref().map(|bank| CentroidTerms {
                bank,
                scope: self.config.max_scope,
                current: &task.classes,
            }),
        )?;
        let loss = tape.value(parts.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(parts.total)?;
        let ex_g = self.extractor.store().flat_grads(&grads, &ex_vars);
        let head_g = self.head.store().flat_grads(&grads, &head_vars);
        self.extractor_opt
            .step(self.extractor.store_mut(), &ex_g, mask, lr)?;
        self.head_opt.step(self.head.store_mut(), &head_g, head_mask, lr)?;
        if let Some(b) = &binding {
            self.bank.step(&grads, b, lr)?;
        }
        Ok(loss)
    }

    /// Number of correct argmax predictions over `ds`.
    pub fn count_correct(&self, ds: &LabeledDataset) -> Result<usize> {
        let mut correct = 0;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(256) {
            let (batch, labels) = ds.batch(chunk);
            let logits = self.head.predict(&self.extractor.features(&batch)?)?;
            correct += logits
                .argmax_rows()
                .into_iter()
                .zip(&labels)
                .filter(|(col, y)| self.head.classes()[*col] == **y)
                .count();
        }
        Ok(correct)
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        Ok(self.count_correct(ds)? as f64 / ds.len() as f64)
    }
}

/// Accuracy on each evaluation task seen so far, plus the overall accuracy
/// on the union of those tasks.
pub fn predict_all(engine: &Engine, eval_tasks: &[TaskDataset]) -> Result<(Vec<f64>, f64)> {
    let seen = &eval_tasks[..engine.tasks_done().min(eval_tasks.len())];
    let mut per_task = Vec::with_capacity(seen.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for t in seen {
        let c = engine.count_correct(&t.data)?;
        per_task.push(c as f64 / t.len() as f64);
        correct += c;
        total += t.len();
    }
    let overall = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok((per_task, overall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn scaled_reference_schedule() {
        let (epochs, s) = LrSchedule::scaled_reference(0.1, 0.235);
        assert_eq!(epochs, 40);
        assert_eq!(s.milestones, vec![19, 28, 35]);
        assert!((s.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(19) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(39) - 1e-4).abs() < 1e-15);
        let plan = s.plan(epochs);
        assert_eq!(plan.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 19, 28, 35]);
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights { gamma1: 0.0, gamma2: 0.0, gamma3: 0.0 }.validate().is_err());
        assert!(LossWeights { gamma1: -1.0, gamma2: 0.0, gamma3: 1.0 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_schedule() {
        let mut c = TrainerConfig::default();
        c.schedule.milestones = vec![10, 5];
        assert!(c.validate().is_err());
        c.schedule.milestones = vec![50];
        assert!(c.validate().is_err());
    }

    #[test]
    fn archive_closed_form_and_round_trip() {
        assert_eq!(ExpansionArchive::closed_form(0.3, 100, 12, 1), 112);
        assert_eq!(ExpansionArchive::closed_form(0.3, 100, 12, 4), 112 + 90);
        let a = ExpansionArchive {
            extractor_scalars: 10,
            head_scalars: 4,
            deltas: vec![
                TaskDelta { task_id: 1, entries: vec![(0, 1.5), (9, -2.0)] },
                TaskDelta { task_id: 2, entries: vec![(3, 0.25)] },
            ],
        };
        assert_eq!(a.cumulative_count(), 7);
        assert_eq!(ExpansionArchive::decode(Path::new("a"), &a.encode()).unwrap(), a);
    }

    #[test]
    fn total_loss_linear_combination() {
        use crate::centroid::{CentroidBank, CentroidStatus};
        let mut bank = CentroidBank::new(2);
        bank.insert(0, vec![1.0, 0.0], CentroidStatus::Learnable).unwrap();
        bank.insert(1, vec![0.6, 0.8], CentroidStatus::Learnable).unwrap();
        let run = |g: LossWeights| {
            let mut tape = Tape::new();
            let f = tape.param(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap());
            let z = tape.param(Tensor::from_rows(&[vec![0.1, 0.4], vec![-0.2, 0.9]]).unwrap());
            let binding = bank.bind(&mut tape).unwrap();
            let w = ReweightConfig::uniform([0, 1]);
            let parts = total_loss(
                &mut tape,
                f,
                z,
                &[1, 0],
                &[0, 1],
                &w,
                &g,
                Some(CentroidTerms { bank: &binding, scope: MaxScope::AllSeen, current: &[0, 1] }),
            )
            .unwrap();
            let v = |x: Option<Var>| x.map(|x| tape.value(x).item());
            (tape.value(parts.ce).item(), v(parts.min), v(parts.max), tape.value(parts.total).item())
        };
        let (ce, _, _, only_ce) = run(LossWeights { gamma1: 1.0, gamma2: 0.0, gamma3: 0.0 });
        assert_eq!(ce, only_ce);
        let (ce, min, max, total) = run(LossWeights { gamma1: 1.0, gamma2: 0.5, gamma3: 0.5 });
        let want = ce + 0.5 * min.unwrap() + 0.5 * max.unwrap();
        assert!((total - want).abs() < 1e-12);
    }
}
