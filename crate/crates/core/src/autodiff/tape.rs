//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape once in reverse and returns the gradient of a scalar loss with respect
//! to every node that depends on a trainable leaf.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    RowNorm(Var, f64),
    Dot(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exact zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Appends the gradient for `var` (zeros if absent) to `out`.
    pub fn extend_into(&self, var: Var, out: &mut Vec<f64>) {
        match &self.grads[var.0] {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat_n(0.0, self.shapes[var.0].iter().product())),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            expected: format!("rank {rank}"),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; receives a gradient in `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |p, q| p + q)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |p, q| p - q)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |p, q| p * q)?;
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), n))
    }

    /// Elementwise division; the denominator must be nonzero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("div", a, b, |p, q| p / q)?;
        if !v.all_finite() {
            return Err(Error::NonFinite("div"));
        }
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), n))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.map(a, |x| x * factor);
        let n = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), n)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        let n = self.needs(&[a]);
        self.push(v, Op::AddScalar(a), n)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let out = matmul_raw(x.data(), y.data(), m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("transpose", x, 2)?;
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        let needs = self.needs(&[a]);
        Ok(self.push(v, Op::Transpose(a), needs))
    }

    /// `[b, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = xv.shape()[1];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % n])
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(v, Op::AddBias(x, bias), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        let n = self.needs(&[a]);
        self.push(v, Op::Relu(a), n)
    }

    /// Stride-1 2D convolution: `[b, ci, h, w] * [co, ci, kh, kw] + [co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.shape() != [w.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let g = ConvGeom::new(x.shape(), w.shape(), padding).ok_or_else(|| Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        })?;
        let mut out = vec![0.0; g.batch * g.co * g.ho * g.wo];
        for n in 0..g.batch {
            for o in 0..g.co {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b.data()[o];
                        g.for_taps(oy, ox, |c, ky, kx, iy, ix| {
                            acc += x.data()[g.x_idx(n, c, iy, ix)] * w.data()[g.w_idx(o, c, ky, kx)];
                        });
                        out[g.out_idx(n, o, oy, ox)] = acc;
                    }
                }
            }
        }
        let v = Tensor::new(vec![g.batch, g.co, g.ho, g.wo], out)?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            needs,
        ))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("avg_pool2", x, 4)?;
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                shape: s.to_vec(),
                expected: "spatial dims >= 2".into(),
            });
        }
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (iy, ix) = (2 * oy, 2 * ox);
                    let sum = x.data()[base + iy * w + ix]
                        + x.data()[base + iy * w + ix + 1]
                        + x.data()[base + (iy + 1) * w + ix]
                        + x.data()[base + (iy + 1) * w + ix + 1];
                    out[plane * ho * wo + oy * wo + ox] = 0.25 * sum;
                }
            }
        }
        let v = Tensor::new(vec![b, c, ho, wo], out)?;
        let needs = self.needs(&[a]);
        Ok(self.push(v, Op::AvgPool2(a), needs))
    }

    /// `[b, c, h, w] -> [b, c]` by spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("global_avg_pool", x, 4)?;
        let s = x.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::new(vec![b, c], out)?;
        let needs = self.needs(&[a]);
        Ok(self.push(v, Op::GlobalAvgPool(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), needs))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = vec![x.rows(), x.row_len()];
        self.reshape(a, shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        let n = self.needs(&[a]);
        self.push(v, Op::SumAll(a), n)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        let n = self.needs(&[a]);
        self.push(v, Op::MeanAll(a), n)
    }

    /// `[b, n] -> [b]` by summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        expect_rank("sum_rows", x, 2)?;
        let v = Tensor::vector(x.data().chunks(x.shape()[1]).map(|r| r.iter().sum()).collect());
        let n = self.needs(&[a]);
        Ok(self.push(v, Op::SumRows(a), n))
    }

    /// Row-wise L2 norm `[b, n] -> [b]`, floored at `eps`.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        expect_rank("row_norm", x, 2)?;
        let v = Tensor::vector(
            x.data()
                .chunks(x.shape()[1])
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
                .collect(),
        );
        let n = self.needs(&[a]);
        Ok(self.push(v, Op::RowNorm(a, eps), n))
    }

    /// Inner product of two vectors of equal length.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let v = Tensor::scalar(x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum());
        let n = self.needs(&[a, b]);
        Ok(self.push(v, Op::Dot(a, b), n))
    }

    /// Picks leading-axis rows of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: x.shape().to_vec(),
                expected: format!("at least {} rows", bad + 1),
            });
        }
        let v = x.select_rows(&indices);
        let n = self.needs(&[a]);
        Ok(self.push(v, Op::GatherRows(a, indices), n))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        let n = self.needs(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), n))
    }

    /// Weighted softmax cross-entropy, `(1/B) sum_i w_i * -log softmax(z_i)[t_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        expect_rank("cross_entropy", z, 2)?;
        let (b, k) = (z.shape()[0], z.shape()[1]);
        if targets.len() != b {
            return Err(Error::LengthMismatch {
                what: "cross_entropy targets",
                expected: b,
                actual: targets.len(),
            });
        }
        if weights.len() != b {
            return Err(Error::LengthMismatch {
                what: "cross_entropy weights",
                expected: b,
                actual: weights.len(),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: z.shape().to_vec(),
                expected: format!("more than {t} classes"),
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            total += weights[i] * (lse - row[targets[i]]);
        }
        let v = Tensor::scalar(total / b as f64);
        let n = self.needs(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            n,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        // Only leaves flagged trainable report gradients; constants stay absent.
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.numel();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], len(*b));
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j];
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], len(*b));
                    for j in 0..g.len() {
                        gb[j] += g[j] * x[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    for j in 0..g.len() {
                        ga[j] += g[j] / y[j];
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], len(*b));
                    for j in 0..g.len() {
                        gb[j] -= g[j] * x[j] / (y[j] * y[j]);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if wants(*a) {
                    // dA[m,k] = G[m,n] * B^T
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for r in 0..m {
                        for c in 0..k {
                            let yr = &y.data()[c * n..(c + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            ga[r * k + c] += gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    // dB[k,n] = A^T * G
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let xa = x.data()[r * k + c];
                            if xa == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[c * n..(c + 1) * n];
                            dst.iter_mut().zip(gr).for_each(|(d, s)| *d += xa * s);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let x = val(*a);
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let ga = accumulate(&mut grads[a.0], m * n);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                if wants(*x) {
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = accumulate(&mut grads[a.0], x.len());
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let geo = ConvGeom::new(x.shape(), w.shape(), *padding).expect("checked in forward");
                if wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], geo.co);
                    for n in 0..geo.batch {
                        for o in 0..geo.co {
                            let start = geo.out_idx(n, o, 0, 0);
                            gb[o] += g[start..start + geo.ho * geo.wo].iter().sum::<f64>();
                        }
                    }
                }
                if wants(*weight) {
                    let gw = accumulate(&mut grads[weight.0], w.numel());
                    for n in 0..geo.batch {
                        for o in 0..geo.co {
                            for oy in 0..geo.ho {
                                for ox in 0..geo.wo {
                                    let go = g[geo.out_idx(n, o, oy, ox)];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    geo.for_taps(oy, ox, |c, ky, kx, iy, ix| {
                                        gw[geo.w_idx(o, c, ky, kx)] += go * x.data()[geo.x_idx(n, c, iy, ix)];
                                    });
                                }
                            }
                        }
                    }
                }
                if wants(*input) {
                    let gx = accumulate(&mut grads[input.0], x.numel());
                    for n in 0..geo.batch {
                        for o in 0..geo.co {
                            for oy in 0..geo.ho {
                                for ox in 0..geo.wo {
                                    let go = g[geo.out_idx(n, o, oy, ox)];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    geo.for_taps(oy, ox, |c, ky, kx, iy, ix| {
                                        gx[geo.x_idx(n, c, iy, ix)] += go * w.data()[geo.w_idx(o, c, ky, kx)];
                                    });
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let ga = accumulate(&mut grads[a.0], b * c * h * w);
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = 0.25 * g[plane * ho * wo + oy * wo + ox];
                            let (iy, ix) = (2 * oy, 2 * ox);
                            ga[base + iy * w + ix] += d;
                            ga[base + iy * w + ix + 1] += d;
                            ga[base + (iy + 1) * w + ix] += d;
                            ga[base + (iy + 1) * w + ix + 1] += d;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let ga = accumulate(&mut grads[a.0], s.iter().product());
                for (p, plane) in ga.chunks_mut(hw).enumerate() {
                    let d = g[p] / hw as f64;
                    plane.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::SumAll(a) => {
                let ga = accumulate(&mut grads[a.0], len(*a));
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanAll(a) => {
                let n = len(*a);
                let ga = accumulate(&mut grads[a.0], n);
                let d = g[0] / n as f64;
                ga.iter_mut().for_each(|v| *v += d);
            }
            Op::SumRows(a) => {
                let cols = val(*a).shape()[1];
                let ga = accumulate(&mut grads[a.0], len(*a));
                for (r, row) in ga.chunks_mut(cols).enumerate() {
                    row.iter_mut().for_each(|v| *v += g[r]);
                }
            }
            Op::RowNorm(a, eps) => {
                let x = val(*a);
                let cols = x.shape()[1];
                let out = nodes[i].value.data();
                let ga = accumulate(&mut grads[a.0], x.numel());
                for r in 0..x.rows() {
                    let norm = out[r];
                    // Floored rows are locally constant.
                    if norm <= *eps {
                        continue;
                    }
                    let xr = x.row(r);
                    for c in 0..cols {
                        ga[r * cols + c] += g[r] * xr[c] / norm;
                    }
                }
            }
            Op::Dot(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], x.len());
                    ga.iter_mut().zip(y).for_each(|(d, q)| *d += g[0] * q);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], y.len());
                    gb.iter_mut().zip(x).for_each(|(d, p)| *d += g[0] * p);
                }
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let cols = x.row_len();
                let ga = accumulate(&mut grads[a.0], x.numel());
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    if wants(*p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let z = val(*logits);
                let (b, k) = (z.shape()[0], z.shape()[1]);
                let gz = accumulate(&mut grads[logits.0], b * k);
                for r in 0..b {
                    let scale = g[0] * weights[r] / b as f64;
                    for c in 0..k {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        gz[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(x: &[f64], y: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let a = x[r * k + c];
            if a == 0.0 {
                continue;
            }
            let src = &y[c * n..(c + 1) * n];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
        }
    }
    out
}

struct ConvGeom {
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Option<Self> {
        let (ho, wo) = ((x[2] + 2 * pad).checked_sub(w[2])? + 1, (x[3] + 2 * pad).checked_sub(w[3])? + 1);
        Some(Self {
            batch: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            kh: w[2],
            kw: w[3],
            ho,
            wo,
            pad,
        })
    }

    fn x_idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.ci + c) * self.h + y) * self.w + x
    }

    fn w_idx(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.ci + c) * self.kh + ky) * self.kw + kx
    }

    fn out_idx(&self, n: usize, o: usize, y: usize, x: usize) -> usize {
        ((n * self.co + o) * self.ho + y) * self.wo + x
    }

    /// Visits every in-bounds kernel tap for output pixel `(oy, ox)`.
    #[inline]
    fn for_taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for c in 0..self.ci {
            for ky in 0..self.kh {
                let Some(iy) = (oy + ky).checked_sub(self.pad).filter(|&v| v < self.h) else {
                    continue;
                };
                for kx in 0..self.kw {
                    let Some(ix) = (ox + kx).checked_sub(self.pad).filter(|&v| v < self.w) else {
                        continue;
                    };
                    f(c, ky, kx, iy, ix);
                }
            }
        }
    }
}
