use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    offset: usize,
}

/// Ordered collection of named parameter tensors with a flat scalar index.
///
/// Entries are append-only, so a scalar's flat index never changes once it
/// has been registered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    total: usize,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::DuplicateParameter(name));
        }
        let n = tensor.numel();
        self.entries.push(Entry {
            name,
            tensor,
            offset: self.total,
        });
        self.total += n;
        Ok(self.entries.len() - 1)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn flat_index(&self, name: &str, offset: usize) -> Result<usize> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))?;
        if offset >= e.tensor.numel() {
            return Err(Error::invalid(format!(
                "offset {offset} out of range for `{name}` with {} scalars",
                e.tensor.numel()
            )));
        }
        Ok(e.offset + offset)
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn locate(&self, flat: usize) -> Option<(&str, usize)> {
        if flat >= self.total {
            return None;
        }
        let i = self.entries.partition_point(|e| e.offset <= flat) - 1;
        let e = &self.entries[i];
        Some((e.name.as_str(), flat - e.offset))
    }

    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (name, off) = self.locate(flat).expect("flat index in range");
        self.get(name).expect("located").data()[off]
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.total {
            return Err(Error::LengthMismatch {
                what: "flat parameter values",
                expected: self.total,
                actual: values.len(),
            });
        }
        for e in &mut self.entries {
            let n = e.tensor.numel();
            e.tensor
                .data_mut()
                .copy_from_slice(&values[e.offset..e.offset + n]);
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a trainable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect()
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.constant(e.tensor.clone()))
            .collect()
    }

    /// Flattens gradients for `vars` (as returned by [`bind`](Self::bind)).
    pub fn flat_grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for &v in vars {
            grads.extend_into(v, &mut out);
        }
        out
    }
}

/// One bit per scalar of a [`ParameterStore`]; `true` means trainable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask {
    bits: Vec<bool>,
}

impl TrainableMask {
    pub fn all(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    pub fn none(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }
}

/// Momentum SGD over a flat parameter store, gated by a [`TrainableMask`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Zeroes the velocity of every scalar the mask freezes.
    pub fn zero_frozen(&mut self, mask: &TrainableMask) {
        self.velocity.resize(mask.len(), 0.0);
        for (v, &on) in self.velocity.iter_mut().zip(mask.bits()) {
            if !on {
                *v = 0.0;
            }
        }
    }

    /// `m <- momentum * m + g; v <- v - lr * m` for every unmasked scalar.
    /// Masked scalars and their velocities are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &[f64],
        mask: &TrainableMask,
        lr: f64,
    ) -> Result<()> {
        let n = store.num_scalars();
        if grads.len() != n {
            return Err(Error::LengthMismatch {
                what: "gradient",
                expected: n,
                actual: grads.len(),
            });
        }
        if mask.len() != n {
            return Err(Error::LengthMismatch {
                what: "trainable mask",
                expected: n,
                actual: mask.len(),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let (name, offset) = store.locate(bad).expect("in range");
            return Err(Error::NonFiniteGradient {
                name: name.to_owned(),
                offset,
            });
        }
        self.velocity.resize(n, 0.0);
        for e in &mut store.entries {
            let data = e.tensor.data_mut();
            for (k, value) in data.iter_mut().enumerate() {
                let i = e.offset + k;
                if !mask.bits[i] {
                    continue;
                }
                let m = self.momentum * self.velocity[i] + grads[i];
                self.velocity[i] = m;
                *value -= lr * m;
            }
        }
        Ok(())
    }
}
