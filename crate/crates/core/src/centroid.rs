//! Per-class centroid bank and the cosine pull/push losses.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::binio::{self, Reader};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::FeatureExtractor;

pub const BANK_MAGIC: &[u8; 4] = b"TAEB";
pub const BANK_VERSION: u32 = 1;
pub const NORM_FLOOR: f64 = 1e-12;

/// `u.v / (|u| |v|)` with both norms floored at [`NORM_FLOOR`].
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CentroidStatus {
    Learnable,
    Frozen,
}

/// Which centroids the separation loss compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaxScope {
    /// Every centroid in the bank; frozen ones contribute but do not move.
    #[default]
    AllSeen,
    /// Only the classes of the current task.
    CurrentTask,
}

#[derive(Clone, Debug, PartialEq)]
struct Centroid {
    vector: Vec<f64>,
    status: CentroidStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    feature_dim: usize,
    centroids: BTreeMap<usize, Centroid>,
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter_mut().for_each(|a| *a /= norm);
    v
}

impl CentroidBank {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            centroids: BTreeMap::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.centroids.keys().copied()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(&class).map(|c| c.vector.as_slice())
    }

    pub fn status(&self, class: usize) -> Option<CentroidStatus> {
        self.centroids.get(&class).map(|c| c.status)
    }

    /// Inserts or replaces a centroid. The vector is normalised; it must be nonzero.
    pub fn insert(&mut self, class: usize, vector: Vec<f64>, status: CentroidStatus) -> Result<()> {
        if vector.len() != self.feature_dim {
            return Err(Error::LengthMismatch {
                what: "centroid",
                expected: self.feature_dim,
                actual: vector.len(),
            });
        }
        if vector.iter().all(|v| *v == 0.0) || !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("centroid for class {class} must be finite and nonzero")));
        }
        self.centroids.insert(
            class,
            Centroid {
                vector: normalized(vector),
                status,
            },
        );
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for c in self.centroids.values_mut() {
            c.status = CentroidStatus::Frozen;
        }
    }

    /// Freezes every existing centroid, then adds a learnable centroid per
    /// class of `task` set to its normalised mean feature under `extractor`.
    pub fn init_for_task(&mut self, task: &TaskDataset, extractor: &FeatureExtractor) -> Result<()> {
        self.freeze_all();
        for &class in &task.classes {
            let idx = task.data.class_indices(class);
            if idx.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            let (batch, _) = task.data.batch(&idx);
            let feats = extractor.features(&batch)?;
            let mut mean = vec![0.0; self.feature_dim];
            for i in 0..feats.rows() {
                mean.iter_mut().zip(feats.row(i)).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= feats.rows() as f64);
            if mean.iter().map(|m| m * m).sum::<f64>().sqrt() <= NORM_FLOOR {
                // Degenerate features (e.g. all-dead units): fall back to a basis direction.
                mean = vec![0.0; self.feature_dim];
                mean[class % self.feature_dim] = 1.0;
            }
            self.insert(class, mean, CentroidStatus::Learnable)?;
        }
        Ok(())
    }

    /// Records the bank on `tape`: learnable centroids as trainable leaves,
    /// frozen ones as constants, stacked into one `[K, d]` matrix.
    pub fn bind(&self, tape: &mut Tape) -> Result<BankBinding> {
        let mut labels = Vec::with_capacity(self.len());
        let mut vars = Vec::with_capacity(self.len());
        let mut learnable = Vec::with_capacity(self.len());
        for (&label, c) in &self.centroids {
            let t = Tensor::new(vec![1, self.feature_dim], c.vector.clone())?;
            let v = match c.status {
                CentroidStatus::Learnable => tape.param(t),
                CentroidStatus::Frozen => tape.constant(t),
            };
            labels.push(label);
            vars.push(v);
            learnable.push(c.status == CentroidStatus::Learnable);
        }
        let matrix = if vars.is_empty() {
            None
        } else {
            Some(tape.concat_rows(&vars)?)
        };
        Ok(BankBinding {
            labels,
            vars,
            learnable,
            matrix,
        })
    }

    /// SGD step on learnable centroids followed by re-normalisation. Frozen
    /// centroids and centroids with an all-zero gradient are left untouched.
    pub fn step(&mut self, grads: &Gradients, binding: &BankBinding, lr: f64) -> Result<()> {
        for (i, &label) in binding.labels.iter().enumerate() {
            if !binding.learnable[i] {
                continue;
            }
            let Some(g) = grads.slice(binding.vars[i]) else {
                continue;
            };
            self.step_one(label, g, lr)?;
        }
        Ok(())
    }

    /// Applies `c <- normalise(c - lr * grad)` to one learnable centroid.
    pub fn step_one(&mut self, class: usize, grad: &[f64], lr: f64) -> Result<()> {
        let c = self.centroids.get_mut(&class).ok_or(Error::MissingCentroid(class))?;
        if c.status == CentroidStatus::Frozen || grad.iter().all(|g| *g == 0.0) {
            return Ok(());
        }
        if let Some(off) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: format!("centroid.{class}"),
                offset: off,
            });
        }
        let moved: Vec<f64> = c.vector.iter().zip(grad).map(|(v, g)| v - lr * g).collect();
        if moved.iter().map(|m| m * m).sum::<f64>().sqrt() > NORM_FLOOR {
            c.vector = normalized(moved);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        binio::put_u32(&mut out, self.len());
        for (&label, c) in &self.centroids {
            binio::put_u32(&mut out, label);
            out.push(match c.status {
                CentroidStatus::Learnable => 0,
                CentroidStatus::Frozen => 1,
            });
            binio::put_f64s(&mut out, &c.vector);
        }
        out
    }

    pub fn load(path: &Path, feature_dim: usize) -> Result<Self> {
        Self::decode(path, &binio::read_file(path)?, feature_dim)
    }

    /// The file does not carry `feature_dim`; the caller supplies it (it is
    /// recorded in the matching model checkpoint).
    pub fn decode(path: &Path, bytes: &[u8], feature_dim: usize) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(BANK_MAGIC)?;
        r.version(BANK_VERSION)?;
        let count = r.u32("class count")? as usize;
        let mut bank = Self::new(feature_dim);
        for _ in 0..count {
            let label = r.u32("label")? as usize;
            let status = match r.u8("status")? {
                0 => CentroidStatus::Learnable,
                1 => CentroidStatus::Frozen,
                s => return Err(r.malformed(format!("unknown centroid status {s}"))),
            };
            let vector = r.f64s(feature_dim, "centroid")?;
            if bank.centroids.contains_key(&label) {
                return Err(r.malformed(format!("class {label} appears twice")));
            }
            bank.centroids.insert(label, Centroid { vector, status });
        }
        r.finish()?;
        Ok(bank)
    }
}

/// A bank recorded on a tape.
#[derive(Debug)]
pub struct BankBinding {
    labels: Vec<usize>,
    vars: Vec<Var>,
    learnable: Vec<bool>,
    matrix: Option<Var>,
}

impl BankBinding {
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn var(&self, class: usize) -> Option<Var> {
        self.row_of(class).map(|i| self.vars[i])
    }

    fn row_of(&self, class: usize) -> Option<usize> {
        self.labels.binary_search(&class).ok()
    }
}

/// Row-wise cosine between two `[B, d]` tape values, returned as `[B]`.
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    let dot = tape.sum_rows(prod)?;
    let na = tape.row_norm(a, NORM_FLOOR)?;
    let nb = tape.row_norm(b, NORM_FLOOR)?;
    let denom = tape.mul(na, nb)?;
    tape.div(dot, denom)
}

/// Pull loss: `-(1/B) sum_i cos(f_i, c_{y_i})`.
pub fn min_loss(tape: &mut Tape, features: Var, labels: &[usize], bank: &BankBinding) -> Result<Var> {
    let rows = labels
        .iter()
        .map(|&y| bank.row_of(y).ok_or(Error::MissingCentroid(y)))
        .collect::<Result<Vec<_>>>()?;
    let matrix = bank.matrix.ok_or_else(|| Error::MissingCentroid(labels.first().copied().unwrap_or(0)))?;
    let targets = tape.gather_rows(matrix, rows)?;
    let cos = cosine_rows(tape, features, targets)?;
    let mean = tape.mean(cos);
    Ok(tape.scale(mean, -1.0))
}

/// Push loss: mean cosine over ordered pairs of distinct centroids in scope.
/// With fewer than two centroids in scope the loss is a constant 0.
pub fn max_loss(tape: &mut Tape, bank: &BankBinding, scope: MaxScope, current: &[usize]) -> Result<Var> {
    let rows: Vec<usize> = match scope {
        MaxScope::AllSeen => (0..bank.labels.len()).collect(),
        MaxScope::CurrentTask => current
            .iter()
            .map(|&c| bank.row_of(c).ok_or(Error::MissingCentroid(c)))
            .collect::<Result<_>>()?,
    };
    let k = rows.len();
    let Some(matrix) = bank.matrix.filter(|_| k >= 2) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let c = if k == bank.labels.len() { matrix } else { tape.gather_rows(matrix, rows)? };
    let ct = tape.transpose(c)?;
    let gram = tape.matmul(c, ct)?;
    let norms = tape.row_norm(c, NORM_FLOOR)?;
    let col = tape.reshape(norms, vec![k, 1])?;
    let row = tape.reshape(norms, vec![1, k])?;
    let outer = tape.matmul(col, row)?;
    let cos = tape.div(gram, outer)?;
    let mut off = vec![1.0; k * k];
    for i in 0..k {
        off[i * k + i] = 0.0;
    }
    let mask = tape.constant(Tensor::new(vec![k, k], off)?);
    let pairs = tape.mul(cos, mask)?;
    let total = tape.sum(pairs);
    Ok(tape.scale(total, 1.0 / (k * (k - 1)) as f64))
}
