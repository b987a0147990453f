//! Gradient-sensitivity ranking of extractor scalars and top-p selection.
//!
//! The previous task's model is run over the new task's data for `passes`
//! epochs. Per mini-batch the plain cross-entropy is backpropagated and the
//! absolute gradient of every extractor scalar is accumulated; the sum is then
//! divided by the number of passes. Nothing is updated. The classifier head
//! takes part in the forward pass but is not ranked.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{ParameterStore, Tape, TrainableMask};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::models::{ClassifierHead, FeatureExtractor};
use crate::rebalance::{weighted_ce, ReweightConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityOptions {
    /// Number of full passes over the task data (`Z`).
    pub passes: usize,
    pub batch_size: usize,
    /// Accumulate signed gradients and rank by `|sum|` instead of summing `|g|`.
    pub signed: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            passes: 1,
            batch_size: 32,
            signed: false,
        }
    }
}

/// Mean accumulated gradient magnitude per extractor scalar (flat order).
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub accumulated: Vec<f64>,
    pub passes: usize,
}

pub fn accumulate_sensitivity(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    task: &TaskDataset,
    opts: &SensitivityOptions,
) -> Result<SensitivityReport> {
    if opts.passes == 0 {
        return Err(Error::invalid("sensitivity needs at least one pass (Z >= 1)"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let n = extractor.store().num_scalars();
    let weights = ReweightConfig::uniform(head.classes().iter().copied());
    let order: Vec<usize> = (0..task.len()).collect();
    let mut total = vec![0.0; n];
    for _ in 0..opts.passes {
        let mut pass = vec![0.0; n];
        for chunk in order.chunks(opts.batch_size) {
            let (batch, labels) = task.data.batch(chunk);
            let mut tape = Tape::new();
            let ex_vars = extractor.store().bind(&mut tape);
            let head_vars = head.store().bind_constant(&mut tape);
            let x = tape.constant(batch);
            let f = extractor.embed(&mut tape, &ex_vars, x)?;
            let z = head.logits(&mut tape, &head_vars, f)?;
            let loss = weighted_ce(&mut tape, z, &labels, head.classes(), &weights)?;
            let grads = tape.backward(loss)?;
            let flat = extractor.store().flat_grads(&grads, &ex_vars);
            if let Some(bad) = flat.iter().position(|g| !g.is_finite()) {
                let (name, offset) = extractor.store().locate(bad).expect("in range");
                return Err(Error::NonFiniteGradient {
                    name: name.to_owned(),
                    offset,
                });
            }
            for (acc, g) in pass.iter_mut().zip(&flat) {
                *acc += if opts.signed { *g } else { g.abs() };
            }
        }
        total.iter_mut().zip(&pass).for_each(|(t, p)| *t += p);
    }
    let z = opts.passes as f64;
    Ok(SensitivityReport {
        accumulated: total.into_iter().map(|g| g.abs() / z).collect(),
        passes: opts.passes,
    })
}

/// `ceil(p * n)`, tolerant of representation error in `p` (0.3 * 10 is 3, not 4).
pub fn selection_count(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { x.ceil() };
    (k as usize).min(n)
}

/// Marks the `ceil(p * N)` largest entries; ties go to the lower flat index.
pub fn select_top_p(report: &SensitivityReport, p: f64) -> Result<TrainableMask> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("selection fraction must be in (0, 1], got {p}")));
    }
    let n = report.accumulated.len();
    let k = selection_count(p, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        report.accumulated[b]
            .total_cmp(&report.accumulated[a])
            .then(a.cmp(&b))
    });
    let mut mask = TrainableMask::none(n);
    for &i in &order[..k] {
        mask.set(i, true);
    }
    Ok(mask)
}

/// CSV dump: `flat_index,name,offset,sensitivity`.
pub fn write_report_csv(report: &SensitivityReport, store: &ParameterStore, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("sensitivity csv", e);
    writeln!(out, "flat_index,name,offset,sensitivity").map_err(io)?;
    for (i, v) in report.accumulated.iter().enumerate() {
        let (name, off) = store
            .locate(i)
            .ok_or_else(|| Error::invalid("report longer than parameter store"))?;
        writeln!(out, "{i},{name},{off},{v}").map_err(io)?;
    }
    Ok(())
}

pub fn save_report_csv(report: &SensitivityReport, store: &ParameterStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_report_csv(report, store, &mut buf)?;
    crate::binio::write_file(path, &buf)
}
