//! Effective-number class weights and the weighted cross-entropy.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReweightConfig {
    pub beta: f64,
    weights: BTreeMap<usize, f64>,
}

impl ReweightConfig {
    /// Weight 1 for every listed class.
    pub fn uniform(classes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            beta: 0.0,
            weights: classes.into_iter().map(|c| (c, 1.0)).collect(),
        }
    }

    pub fn weight(&self, class: usize) -> Result<f64> {
        self.weights
            .get(&class)
            .copied()
            .ok_or(Error::MissingWeight(class))
    }

    pub fn weights(&self) -> &BTreeMap<usize, f64> {
        &self.weights
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            beta: self.beta,
            weights: self.weights.iter().map(|(&c, &w)| (c, w * factor)).collect(),
        }
    }
}

/// `w_i = (1 - beta) / (1 - beta^k_i)` for each class count `k_i`.
pub fn effective_weights(counts: &BTreeMap<usize, usize>, beta: f64) -> Result<ReweightConfig> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must be in [0, 1), got {beta}")));
    }
    let mut weights = BTreeMap::new();
    for (&class, &k) in counts {
        if k == 0 {
            return Err(Error::invalid(format!("class {class} has a zero sample count")));
        }
        let w = if beta == 0.0 {
            1.0
        } else {
            (1.0 - beta) / (1.0 - beta.powi(k.min(i32::MAX as usize) as i32))
        };
        weights.insert(class, w);
    }
    Ok(ReweightConfig { beta, weights })
}

/// `(1/B) sum_i w_{y_i} * CE(logits_i, y_i)`. `columns[k]` is the class label
/// of logit column `k`.
pub fn weighted_ce(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    columns: &[usize],
    weights: &ReweightConfig,
) -> Result<Var> {
    let column_of: BTreeMap<usize, usize> = columns.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut targets = Vec::with_capacity(labels.len());
    let mut sample_weights = Vec::with_capacity(labels.len());
    for &y in labels {
        targets.push(*column_of.get(&y).ok_or(Error::UnknownClass(y))?);
        sample_weights.push(weights.weight(y)?);
    }
    tape.cross_entropy(logits, &targets, &sample_weights)
}
