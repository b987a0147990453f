//! Experiment runner: data preparation, the task stream, and run-directory output.
//!
//! Run directory layout:
//!
//! ```text
//! config.json            resolved config
//! checkpoints/task_t.model, checkpoints/task_t.bank
//! archive.bin            sparse per-task extractor deltas
//! metrics.csv            step, task_1..task_T, avg, last
//! report.json            config echo, final metrics, expansion accounting
//! curve.svg              per-step Avg and Last
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{load_dataset, make_long_tailed, save_dataset, split_tasks, LabeledDataset, SyntheticSpec, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::models::{save_checkpoint, Architecture, FeatureExtractor};
use crate::plot::accuracy_curve_svg;
use crate::trainer::{predict_all, Engine, ExpansionArchive, Method, TaskSummary};

/// Long-tailed training tasks and balanced evaluation tasks with matching labels.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train_tasks: Vec<TaskDataset>,
    pub eval_tasks: Vec<TaskDataset>,
    pub input_shape: Vec<usize>,
}

fn flatten_for(arch: Architecture, ds: LabeledDataset) -> Result<LabeledDataset> {
    if arch != Architecture::Mlp || ds.sample_shape().len() == 1 {
        return Ok(ds);
    }
    let n = ds.len();
    let d: usize = ds.sample_shape().iter().product();
    let samples = ds.samples().clone().reshaped(vec![n, d])?;
    LabeledDataset::new(samples, ds.labels().to_vec(), ds.class_count())
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => {
            let d = spec.generate()?;
            (d.train, d.test)
        }
        DatasetConfig::Files(f) => {
            let train = load_dataset(&f.train_data, &f.train_labels, f.classes)?;
            let test = load_dataset(&f.test_data, &f.test_labels, Some(train.class_count()))?;
            (train, test)
        }
    };
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::ShapeMismatch {
            op: "prepare_data",
            left: train.sample_shape().to_vec(),
            right: test.sample_shape().to_vec(),
        });
    }
    let train = flatten_for(cfg.model.arch, train)?;
    let test = flatten_for(cfg.model.arch, test)?;
    let lt = make_long_tailed(&train, &cfg.protocol)?;
    Ok(PreparedData {
        input_shape: lt.sample_shape().to_vec(),
        train_tasks: split_tasks(&lt, cfg.tasks.steps)?,
        eval_tasks: split_tasks(&test, cfg.tasks.steps)?,
    })
}

pub fn build_extractor(cfg: &ExperimentConfig, input_shape: &[usize]) -> Result<FeatureExtractor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    match cfg.model.arch {
        Architecture::Mlp => {
            let [d] = input_shape else {
                return Err(Error::Config(format!("mlp expects flat samples, got shape {input_shape:?}")));
            };
            FeatureExtractor::mlp(*d, &cfg.model.hidden, cfg.model.feature_dim, &mut rng)
        }
        Architecture::SmallConv => {
            let &[c, h, w] = input_shape else {
                return Err(Error::Config(format!("small-conv expects [c, h, w] samples, got {input_shape:?}")));
            };
            FeatureExtractor::small_conv([c, h, w], cfg.model.hidden[0], cfg.model.feature_dim, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub avg: f64,
    pub last: f64,
    pub avg_per_step: Vec<f64>,
    pub last_per_step: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub method: Method,
    /// Fraction of extractor scalars trained per task after the first.
    pub p: f64,
    pub tasks: usize,
    pub extractor_scalars: usize,
    pub head_scalars: usize,
    pub per_task_trained: Vec<usize>,
    pub cumulative: usize,
    pub closed_form: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub metrics: FinalMetrics,
    pub expansion: ExpansionReport,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub report: RunReport,
    pub engine: Engine,
}

impl RunOutcome {
    pub fn avg(&self) -> f64 {
        self.report.metrics.avg
    }

    pub fn last(&self) -> f64 {
        self.report.metrics.last
    }
}

/// Trains the full task stream. Writes the run directory when `out` is given.
pub fn execute(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let extractor = build_extractor(cfg, &data.input_shape)?;
    let mut engine = Engine::new(cfg.trainer_config(), extractor)?;
    let steps = cfg.tasks.steps;
    let mut matrix = AccuracyMatrix::new(steps);
    let mut summaries = Vec::with_capacity(steps);
    if let Some(dir) = out {
        crate::binio::write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;
    }
    for task in &data.train_tasks {
        summaries.push(engine.train_task(task)?);
        let (row, overall) = predict_all(&engine, &data.eval_tasks)?;
        matrix.push_row(row, overall)?;
        if let Some(dir) = out {
            let t = task.task_id;
            let ck = dir.join("checkpoints");
            save_checkpoint(&ck.join(format!("task_{t}.model")), engine.extractor(), engine.head())?;
            engine.bank().save(&ck.join(format!("task_{t}.bank")))?;
        }
    }

    let archive = engine.archive();
    let effective_p = if cfg.tae.method == Method::Tae { cfg.tae.p } else { 1.0 };
    let expansion = ExpansionReport {
        method: cfg.tae.method,
        p: effective_p,
        tasks: steps,
        extractor_scalars: archive.extractor_scalars,
        head_scalars: archive.head_scalars,
        per_task_trained: archive.deltas.iter().map(|d| d.entries.len()).collect(),
        cumulative: archive.cumulative_count(),
        closed_form: ExpansionArchive::closed_form(effective_p, archive.extractor_scalars, archive.head_scalars, steps),
    };
    let metrics = FinalMetrics {
        avg: matrix.avg_accuracy(steps)?,
        last: matrix.last_accuracy()?,
        avg_per_step: (1..=steps).map(|s| matrix.avg_accuracy(s)).collect::<Result<_>>()?,
        last_per_step: (1..=steps).filter_map(|s| matrix.overall(s)).collect(),
        matrix: (1..=steps).filter_map(|s| matrix.row(s).map(<[f64]>::to_vec)).collect(),
    };
    let report = RunReport {
        config: cfg.clone(),
        metrics,
        expansion,
        tasks: summaries,
    };
    if let Some(dir) = out {
        archive.save(&dir.join("archive.bin"))?;
        matrix.save_csv(&dir.join("metrics.csv"))?;
        let json = serde_json::to_string_pretty(&report)?;
        crate::binio::write_file(&dir.join("report.json"), json.as_bytes())?;
        let title = format!("{:?} p={}", cfg.tae.method, effective_p);
        crate::binio::write_file(&dir.join("curve.svg"), accuracy_curve_svg(&matrix, &title).as_bytes())?;
    }
    Ok(RunOutcome { matrix, report, engine })
}

/// Runs `cfg` and writes its outputs to `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    execute(cfg, Some(&cfg.output.dir))
}

/// Worker count from `TAE_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("TAE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs independent configs, each into its own output directory.
pub fn run_many(cfgs: &[ExperimentConfig], write: bool) -> Result<Vec<RunOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        cfgs.par_iter()
            .map(|c| execute(c, write.then_some(c.output.dir.as_path())))
            .collect()
    })
}

/// Ablation variants: CE only, +reweighting, +reweighting+centroid losses.
pub fn ablation_variant(base: &ExperimentConfig, reweight: bool, ced: bool) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.loss.beta = match (reweight, base.loss.beta > 0.0) {
        (false, _) => 0.0,
        (true, true) => base.loss.beta,
        (true, false) => 0.95,
    };
    if !ced {
        cfg.loss.gamma2 = 0.0;
        cfg.loss.gamma3 = 0.0;
    } else if base.loss.gamma2 == 0.0 && base.loss.gamma3 == 0.0 {
        cfg.loss.gamma2 = 0.5;
        cfg.loss.gamma3 = 0.5;
    }
    cfg
}

/// Naive fine-tuning: every scalar trainable, no memory, plain CE.
pub fn finetune_control(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = ablation_variant(base, false, false);
    cfg.tae.method = Method::Finetune;
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub reweight: bool,
    pub ced: bool,
    pub method: Method,
    pub avg: f64,
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<ComparisonRow>,
    pub control: ComparisonRow,
}

pub const ABLATION_GRID: [(&str, bool, bool); 3] = [("base", false, false), ("rw", true, false), ("rw-ced", true, true)];

fn comparison_table(rows: &[&ComparisonRow]) -> String {
    let mut out = String::from("name,method,reweight,ced,avg,last\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            serde_json::to_value(r.method).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            r.reweight,
            r.ced,
            r.avg,
            r.last
        ));
    }
    out
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&ComparisonRow> = self.rows.iter().collect();
        rows.push(&self.control);
        comparison_table(&rows)
    }
}

/// The three-row grid plus the fine-tune control, sharing one seed.
/// Each run lands in `<output.dir>/<row name>`.
pub fn ablate(base: &ExperimentConfig, write: bool) -> Result<AblationReport> {
    base.validate()?;
    let mut cfgs: Vec<ExperimentConfig> = ABLATION_GRID
        .iter()
        .map(|&(name, rw, ced)| {
            let mut c = ablation_variant(base, rw, ced);
            c.output.dir = base.output.dir.join(name);
            c
        })
        .collect();
    let mut control = finetune_control(base);
    control.output.dir = base.output.dir.join("finetune");
    cfgs.push(control);
    let outcomes = run_many(&cfgs, write)?;
    let row = |name: &str, rw: bool, ced: bool, o: &RunOutcome| ComparisonRow {
        name: name.to_owned(),
        reweight: rw,
        ced,
        method: o.report.config.tae.method,
        avg: o.avg(),
        last: o.last(),
    };
    let report = AblationReport {
        rows: ABLATION_GRID
            .iter()
            .zip(&outcomes)
            .map(|(&(n, rw, ced), o)| row(n, rw, ced, o))
            .collect(),
        control: row("finetune", false, false, &outcomes[3]),
    };
    if write {
        let dir = &base.output.dir;
        crate::binio::write_file(&dir.join("ablation.csv"), report.to_csv().as_bytes())?;
        crate::binio::write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub avg: f64,
    pub last: f64,
    pub cumulative: usize,
    pub closed_form: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,avg,last,cumulative,closed_form\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.p, r.avg, r.last, r.cumulative, r.closed_form));
    }
    out
}

/// One run per `tae.sweep` value, each in `<output.dir>/p-<p>`.
pub fn sweep_p(base: &ExperimentConfig, write: bool) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let cfgs: Vec<ExperimentConfig> = base
        .tae
        .sweep
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            c.tae.p = p;
            c.tae.method = Method::Tae;
            c.output.dir = base.output.dir.join(format!("p-{p}"));
            c
        })
        .collect();
    let rows: Vec<SweepRow> = run_many(&cfgs, write)?
        .iter()
        .map(|o| SweepRow {
            p: o.report.config.tae.p,
            avg: o.avg(),
            last: o.last(),
            cumulative: o.report.expansion.cumulative,
            closed_form: o.report.expansion.closed_form,
        })
        .collect();
    if write {
        let dir = &base.output.dir;
        crate::binio::write_file(&dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
        crate::binio::write_file(&dir.join("sweep.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    }
    Ok(rows)
}

/// File names written by [`gen_data`].
pub fn data_files(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join("train.data"),
        dir.join("train.labels"),
        dir.join("test.data"),
        dir.join("test.labels"),
    ]
}

/// Writes synthetic train/test splits in the tensor and label file formats.
pub fn gen_data(spec: &SyntheticSpec, dir: &Path) -> Result<[PathBuf; 4]> {
    let data = spec.generate()?;
    let files = data_files(dir);
    save_dataset(&data.train, &files[0], &files[1])?;
    save_dataset(&data.test, &files[2], &files[3])?;
    Ok(files)
}

/// Reloads `metrics.csv` from a run directory and re-renders `curve.svg`.
pub fn render_report(run_dir: &Path) -> Result<AccuracyMatrix> {
    let m = AccuracyMatrix::load_csv(&run_dir.join("metrics.csv"))?;
    let title = run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    crate::binio::write_file(&run_dir.join("curve.svg"), accuracy_curve_svg(&m, &title).as_bytes())?;
    Ok(m)
}
