//! Experiment configuration as read from JSON.
//!
//! Every section rejects unknown keys, so a typo fails before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centroid::MaxScope;
use crate::data::{LtProtocol, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::trainer::{LossWeights, LrSchedule, Method, TrainerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Files(FileDataset),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub train_data: PathBuf,
    pub train_labels: PathBuf,
    pub test_data: PathBuf,
    pub test_labels: PathBuf,
    /// Defaults to `max(label) + 1` over the training labels.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub feature_dim: usize,
    /// Hidden widths for `mlp`; for `small-conv` the single entry is the
    /// first conv layer's channel count.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaeConfig {
    pub p: f64,
    #[serde(rename = "Z")]
    pub z: usize,
    pub signed_accumulation: bool,
    pub max_scope: MaxScope,
    #[serde(default)]
    pub method: Method,
    /// Values visited by `sweep-p`.
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
}

fn default_sweep() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleConfig,
    pub momentum: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub protocol: LtProtocol,
    pub tasks: TasksConfig,
    pub model: ModelConfig,
    pub tae: TaeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.per_class < self.protocol.head_count {
                return Err(Error::Config(format!(
                    "synthetic per_class {} is below the protocol head_count {}",
                    s.per_class, self.protocol.head_count
                )));
            }
            if s.classes % self.tasks.steps.max(1) != 0 {
                return Err(Error::UnevenSplit {
                    classes: s.classes,
                    steps: self.tasks.steps,
                });
            }
        }
        if self.tasks.steps == 0 {
            return Err(Error::Config("tasks.steps must be >= 1".into()));
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.model.arch == Architecture::SmallConv && self.model.hidden.len() != 1 {
            return Err(Error::Config("small-conv takes exactly one hidden entry (channels)".into()));
        }
        if self.tae.sweep.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Config(format!("sweep values must be in (0, 1], got {:?}", self.tae.sweep)));
        }
        self.trainer_config().validate()
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            method: self.tae.method,
            p: self.tae.p,
            sensitivity_passes: self.tae.z,
            signed_accumulation: self.tae.signed_accumulation,
            max_scope: self.tae.max_scope,
            gammas: LossWeights {
                gamma1: self.loss.gamma1,
                gamma2: self.loss.gamma2,
                gamma3: self.loss.gamma3,
            },
            beta: self.loss.beta,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: LrSchedule {
                base_lr: self.train.lr,
                milestones: self.train.schedule.milestones.clone(),
                factor: self.train.schedule.factor,
            },
            momentum: self.train.momentum,
            seed: self.train.seed,
            memory_per_class: self.protocol.memory_per_class,
        }
    }

    /// The desk-scale reference benchmark: 20 Gaussian-blob classes, head 200,
    /// rho 0.1, shuffled, 5 tasks, MLP backbone, p = 0.3. The base rate is
    /// 0.05 because the normalization-free MLP diverges at 0.1.
    pub fn reference(seed: u64, dir: impl Into<PathBuf>) -> Self {
        let (epochs, schedule) = LrSchedule::scaled_reference(0.1, 0.235);
        Self {
            dataset: DatasetConfig::Synthetic(SyntheticSpec {
                classes: 20,
                per_class: 200,
                test_per_class: 50,
                dims: vec![32],
                radius: 3.0,
                sigma: 1.0,
                seed,
            }),
            protocol: LtProtocol {
                rho: 0.1,
                head_count: 200,
                memory_per_class: 10,
                shuffled: true,
                seed,
            },
            tasks: TasksConfig { steps: 5 },
            model: ModelConfig {
                arch: Architecture::Mlp,
                feature_dim: 32,
                hidden: vec![64],
            },
            tae: TaeConfig {
                p: 0.3,
                z: 1,
                signed_accumulation: false,
                max_scope: MaxScope::AllSeen,
                method: Method::Tae,
                sweep: default_sweep(),
            },
            loss: LossConfig {
                gamma1: 1.0,
                gamma2: 0.5,
                gamma3: 0.5,
                beta: 0.95,
            },
            train: TrainConfig {
                epochs,
                batch_size: 32,
                lr: 0.05,
                schedule: ScheduleConfig {
                    milestones: schedule.milestones,
                    factor: schedule.factor,
                },
                momentum: 0.9,
                seed,
            },
            output: OutputConfig { dir: dir.into() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips_through_json() {
        let cfg = ExperimentConfig::reference(3, "out");
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::reference(0, "o").to_json()).unwrap();
        v["loss"]["gamma4"] = serde_json::json!(1.0);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn missing_required_key_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::reference(0, "o").to_json()).unwrap();
        v["tae"].as_object_mut().unwrap().remove("Z");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn semantic_checks() {
        let mut cfg = ExperimentConfig::reference(0, "o");
        cfg.tae.p = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::reference(0, "o");
        cfg.tasks.steps = 3;
        assert!(cfg.validate().is_err());
    }
}
