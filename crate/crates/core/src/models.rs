//! Small feature extractors and the expandable linear classifier head.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Tensor, Var};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TAEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp,
    SmallConv,
}

impl Architecture {
    fn code(self) -> u8 {
        match self {
            Architecture::Mlp => 0,
            Architecture::SmallConv => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Architecture::Mlp),
            1 => Some(Architecture::SmallConv),
            _ => None,
        }
    }
}

/// Backbone producing `[batch, feature_dim]` embeddings.
///
/// * `Mlp`: `input -> hidden(relu) -> ... -> feature_dim` (last layer linear).
/// * `SmallConv`: `conv3x3(relu) -> avgpool2 -> conv3x3(relu) -> global avgpool`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    arch: Architecture,
    input_shape: Vec<usize>,
    feature_dim: usize,
    store: ParameterStore,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

impl FeatureExtractor {
    /// MLP with the given hidden widths. Weights use He-uniform init, biases zero.
    pub fn mlp(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("mlp widths must be positive"));
        }
        let mut store = ParameterStore::new();
        let mut fan_in = input_dim;
        for (i, &width) in hidden.iter().chain(std::iter::once(&feature_dim)).enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            store.add(format!("fc{i}.weight"), uniform(rng, &[fan_in, width], bound))?;
            store.add(format!("fc{i}.bias"), Tensor::zeros(&[width]))?;
            fan_in = width;
        }
        Ok(Self {
            arch: Architecture::Mlp,
            input_shape: vec![input_dim],
            feature_dim,
            store,
        })
    }

    pub fn small_conv(
        input_shape: [usize; 3],
        channels: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        if c == 0 || h < 2 || w < 2 || channels == 0 || feature_dim == 0 {
            return Err(Error::invalid(
                "small-conv needs positive channels and spatial dims >= 2",
            ));
        }
        let mut store = ParameterStore::new();
        let b1 = (6.0 / (c * 9) as f64).sqrt();
        store.add("conv1.weight", uniform(rng, &[channels, c, 3, 3], b1))?;
        store.add("conv1.bias", Tensor::zeros(&[channels]))?;
        let b2 = (6.0 / (channels * 9) as f64).sqrt();
        store.add("conv2.weight", uniform(rng, &[feature_dim, channels, 3, 3], b2))?;
        store.add("conv2.bias", Tensor::zeros(&[feature_dim]))?;
        Ok(Self {
            arch: Architecture::SmallConv,
            input_shape: input_shape.to_vec(),
            feature_dim,
            store,
        })
    }

    /// Builds an extractor from an existing parameter store. The layer
    /// structure is inferred from parameter names and shapes.
    pub fn from_store(arch: Architecture, input_shape: Vec<usize>, feature_dim: usize, store: ParameterStore) -> Result<Self> {
        let ex = Self {
            arch,
            input_shape,
            feature_dim,
            store,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        let bad = |why: String| Error::invalid(format!("inconsistent {:?} extractor: {why}", self.arch));
        match self.arch {
            Architecture::Mlp => {
                if self.input_shape.len() != 1 || self.store.is_empty() || !self.store.len().is_multiple_of(2) {
                    return Err(bad("expected weight/bias pairs over a vector input".into()));
                }
                let mut fan_in = self.input_shape[0];
                for i in 0..self.store.len() / 2 {
                    let w = self.store.get(&format!("fc{i}.weight"))?;
                    let b = self.store.get(&format!("fc{i}.bias"))?;
                    if w.shape().len() != 2 || w.shape()[0] != fan_in || b.shape() != [w.shape()[1]] {
                        return Err(bad(format!("layer {i} has shapes {:?}/{:?}", w.shape(), b.shape())));
                    }
                    fan_in = w.shape()[1];
                }
                if fan_in != self.feature_dim {
                    return Err(bad(format!("output width {fan_in} != feature_dim {}", self.feature_dim)));
                }
            }
            Architecture::SmallConv => {
                let w1 = self.store.get("conv1.weight")?;
                let w2 = self.store.get("conv2.weight")?;
                if self.input_shape.len() != 3
                    || w1.shape().len() != 4
                    || w1.shape()[1] != self.input_shape[0]
                    || w2.shape().len() != 4
                    || w2.shape()[1] != w1.shape()[0]
                    || w2.shape()[0] != self.feature_dim
                    || self.store.len() != 4
                {
                    return Err(bad("conv weight shapes do not chain".into()));
                }
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Records the forward pass on `tape`. `params` must come from binding
    /// this extractor's store.
    pub fn embed(&self, tape: &mut Tape, params: &[Var], batch: Var) -> Result<Var> {
        let shape = tape.value(batch).shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::InvalidShape {
                op: "embed",
                shape: shape.to_vec(),
                expected: format!("[batch, {:?}]", self.input_shape),
            });
        }
        match self.arch {
            Architecture::Mlp => {
                let layers = params.len() / 2;
                let mut x = batch;
                for i in 0..layers {
                    x = tape.matmul(x, params[2 * i])?;
                    x = tape.add_bias(x, params[2 * i + 1])?;
                    if i + 1 < layers {
                        x = tape.relu(x);
                    }
                }
                Ok(x)
            }
            Architecture::SmallConv => {
                let x = tape.conv2d(batch, params[0], params[1], 1)?;
                let x = tape.relu(x);
                let x = tape.avg_pool2(x)?;
                let x = tape.conv2d(x, params[2], params[3], 1)?;
                let x = tape.relu(x);
                tape.global_avg_pool(x)
            }
        }
    }

    /// Inference-only embedding of a batch.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind_constant(&mut tape);
        let x = tape.constant(batch.clone());
        let f = self.embed(&mut tape, &params, x)?;
        Ok(tape.value(f).clone())
    }
}

/// Linear head over all seen classes. Each growth appends a new weight/bias
/// block so existing scalars keep their flat indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    feature_dim: usize,
    classes: Vec<usize>,
    store: ParameterStore,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            classes: Vec::new(),
            store: ParameterStore::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class label of every logit column, in column order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn column_of(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Appends rows for `labels`, drawn from `U(-1/sqrt(d), 1/sqrt(d))` with zero bias.
    pub fn grow(&mut self, labels: &[usize], rng: &mut impl Rng) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::invalid("grow_head needs at least one new class"));
        }
        if let Some(&dup) = labels.iter().find(|l| self.classes.contains(l)) {
            return Err(Error::invalid(format!("class {dup} already has a head row")));
        }
        let block = self.store.len() / 2;
        let bound = 1.0 / (self.feature_dim as f64).sqrt();
        self.store.add(
            format!("head.weight.{block}"),
            uniform(rng, &[labels.len(), self.feature_dim], bound),
        )?;
        self.store
            .add(format!("head.bias.{block}"), Tensor::zeros(&[labels.len()]))?;
        self.classes.extend_from_slice(labels);
        Ok(())
    }

    /// Records `features @ W^T + b` on `tape`, returning `[batch, num_classes]` logits.
    pub fn logits(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<Var> {
        let fshape = tape.value(features).shape();
        if fshape.len() != 2 || fshape[1] != self.feature_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: fshape.to_vec(),
                right: vec![self.num_classes(), self.feature_dim],
            });
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("classifier head has no classes"));
        }
        let weights: Vec<Var> = params.iter().step_by(2).copied().collect();
        let biases: Vec<Var> = params.iter().skip(1).step_by(2).copied().collect();
        let w = if weights.len() == 1 { weights[0] } else { tape.concat_rows(&weights)? };
        let b = if biases.len() == 1 { biases[0] } else { tape.concat_rows(&biases)? };
        let wt = tape.transpose(w)?;
        let z = tape.matmul(features, wt)?;
        tape.add_bias(z, b)
    }

    /// Inference-only logits.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind_constant(&mut tape);
        let f = tape.constant(features.clone());
        let z = self.logits(&mut tape, &params, f)?;
        Ok(tape.value(z).clone())
    }
}

/// Writes the extractor and head to a `TAEC` checkpoint.
pub fn save_checkpoint(path: &Path, extractor: &FeatureExtractor, head: &ClassifierHead) -> Result<()> {
    binio::write_file(path, &encode_checkpoint(extractor, head))
}

pub fn encode_checkpoint(extractor: &FeatureExtractor, head: &ClassifierHead) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(extractor.arch.code());
    binio::put_u32(&mut out, extractor.feature_dim);
    out.push(extractor.input_shape.len() as u8);
    for &d in &extractor.input_shape {
        binio::put_u32(&mut out, d);
    }
    binio::put_u32(&mut out, extractor.store.len());
    for (name, t) in extractor.store.iter() {
        binio::put_named_tensor(&mut out, name, t);
    }
    binio::put_u32(&mut out, head.classes.len());
    for &c in &head.classes {
        binio::put_u32(&mut out, c);
    }
    binio::put_u32(&mut out, head.store.len());
    for (name, t) in head.store.iter() {
        binio::put_named_tensor(&mut out, name, t);
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(FeatureExtractor, ClassifierHead)> {
    let bytes = binio::read_file(path)?;
    decode_checkpoint(path, &bytes)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(FeatureExtractor, ClassifierHead)> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let code = r.u8("architecture")?;
    let arch = Architecture::from_code(code).ok_or_else(|| r.malformed(format!("unknown architecture code {code}")))?;
    let feature_dim = r.u32("feature_dim")? as usize;
    let ndim = r.u8("input rank")? as usize;
    let input_shape = (0..ndim)
        .map(|_| r.u32("input dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut store = ParameterStore::new();
    for _ in 0..r.u32("parameter count")? {
        let (name, t) = r.named_tensor()?;
        store.add(name, t)?;
    }
    let extractor = FeatureExtractor::from_store(arch, input_shape, feature_dim, store)
        .map_err(|e| r.malformed(e.to_string()))?;

    let n_classes = r.u32("head class count")? as usize;
    let classes = (0..n_classes)
        .map(|_| r.u32("head classes").map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut head_store = ParameterStore::new();
    for _ in 0..r.u32("head parameter count")? {
        let (name, t) = r.named_tensor()?;
        head_store.add(name, t)?;
    }
    let rows: usize = head_store
        .iter()
        .step_by(2)
        .map(|(_, t)| if t.shape().len() == 2 && t.shape()[1] == feature_dim { t.shape()[0] } else { usize::MAX / 4 })
        .sum();
    if rows != n_classes || !head_store.len().is_multiple_of(2) {
        return Err(r.malformed("head blocks do not match the class list"));
    }
    r.finish()?;
    Ok((
        extractor,
        ClassifierHead {
            feature_dim,
            classes,
            store: head_store,
        },
    ))
}
