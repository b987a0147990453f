//! Shared helpers: a finite-difference gradient checker over randomized
//! graphs, and a brute-force reimplementation of a 2-layer MLP's gradients.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tae::autodiff::{Tape, Tensor, Var};
use tae::Result;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Values with magnitude in [0.1, 1] and random sign, so ReLU kinks and
/// small denominators stay far from the finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap()
}

pub const ALL_OPS: [&str; 24] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "add_bias",
    "relu",
    "conv2d",
    "avg_pool2",
    "global_avg_pool",
    "reshape",
    "flatten",
    "sum",
    "mean",
    "sum_rows",
    "row_norm",
    "dot",
    "gather_rows",
    "concat_rows",
    "cross_entropy",
    "composite",
];

/// A random instance of `op` with random sizes.
pub fn random_case(op: &'static str, seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let case = |inputs: Vec<Tensor>, build: Build| GradCase { op, inputs, build };
    match op {
        "add" => case(
            vec![away_from_zero(&mut rng, &[r, c]), away_from_zero(&mut rng, &[r, c])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        "sub" => case(
            vec![away_from_zero(&mut rng, &[r, c]), away_from_zero(&mut rng, &[r, c])],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        "mul" => case(
            vec![away_from_zero(&mut rng, &[r, c]), away_from_zero(&mut rng, &[r, c])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        "div" => case(
            vec![away_from_zero(&mut rng, &[r, c]), positive(&mut rng, &[r, c])],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        "scale" => {
            let f: f64 = rng.gen_range(-2.0..2.0);
            case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(move |t, v| Ok(t.scale(v[0], f))))
        }
        "add_scalar" => {
            let k: f64 = rng.gen_range(-2.0..2.0);
            case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(move |t, v| Ok(t.add_scalar(v[0], k))))
        }
        "matmul" => {
            let k = rng.gen_range(1..=4);
            case(
                vec![away_from_zero(&mut rng, &[r, k]), away_from_zero(&mut rng, &[k, c])],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        "transpose" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| t.transpose(v[0]))),
        "add_bias" => case(
            vec![away_from_zero(&mut rng, &[r, c]), away_from_zero(&mut rng, &[c])],
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        "relu" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| Ok(t.relu(v[0])))),
        "conv2d" => {
            let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(3..=5), rng.gen_range(3..=5));
            let pad = rng.gen_range(0..=1);
            case(
                vec![
                    away_from_zero(&mut rng, &[b, ci, h, w]),
                    away_from_zero(&mut rng, &[co, ci, 3, 3]),
                    away_from_zero(&mut rng, &[co]),
                ],
                Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], pad)),
            )
        }
        "avg_pool2" => {
            let (b, ch) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let (h, w) = (2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
            case(vec![away_from_zero(&mut rng, &[b, ch, h, w])], Box::new(|t, v| t.avg_pool2(v[0])))
        }
        "global_avg_pool" => {
            let (b, ch) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            case(vec![away_from_zero(&mut rng, &[b, ch, h, w])], Box::new(|t, v| t.global_avg_pool(v[0])))
        }
        "reshape" => case(
            vec![away_from_zero(&mut rng, &[r, c])],
            Box::new(move |t, v| t.reshape(v[0], vec![c, r])),
        ),
        "flatten" => {
            let d = rng.gen_range(1..=3);
            case(vec![away_from_zero(&mut rng, &[r, c, d])], Box::new(|t, v| t.flatten(v[0])))
        }
        "sum" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| Ok(t.sum(v[0])))),
        "mean" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| Ok(t.mean(v[0])))),
        "sum_rows" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| t.sum_rows(v[0]))),
        "row_norm" => case(vec![away_from_zero(&mut rng, &[r, c])], Box::new(|t, v| t.row_norm(v[0], 1e-12))),
        "dot" => case(
            vec![away_from_zero(&mut rng, &[r * c]), away_from_zero(&mut rng, &[r * c])],
            Box::new(|t, v| t.dot(v[0], v[1])),
        ),
        "gather_rows" => {
            let idx: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..r)).collect();
            case(
                vec![away_from_zero(&mut rng, &[r, c])],
                Box::new(move |t, v| t.gather_rows(v[0], idx.clone())),
            )
        }
        "concat_rows" => {
            let r2 = rng.gen_range(1..=3);
            case(
                vec![away_from_zero(&mut rng, &[r, c]), away_from_zero(&mut rng, &[r2, c])],
                Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
            )
        }
        "cross_entropy" => {
            let k = c + 1;
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..k)).collect();
            let weights: Vec<f64> = (0..r).map(|_| rng.gen_range(0.05..2.0)).collect();
            case(
                vec![away_from_zero(&mut rng, &[r, k])],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, &weights)),
            )
        }
        "composite" => {
            // linear -> relu -> linear -> cross entropy, plus a cosine term
            let (i, h, k) = (rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=3));
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..k)).collect();
            let x = away_from_zero(&mut rng, &[r, i]);
            case(
                vec![
                    away_from_zero(&mut rng, &[i, h]),
                    away_from_zero(&mut rng, &[h]),
                    away_from_zero(&mut rng, &[h, k]),
                    away_from_zero(&mut rng, &[r, k]),
                ],
                Box::new(move |t, v| {
                    let x = t.constant(x.clone());
                    let a = t.matmul(x, v[0])?;
                    let a = t.add_bias(a, v[1])?;
                    let a = t.relu(a);
                    let z = t.matmul(a, v[2])?;
                    let ce = t.cross_entropy(z, &targets, &vec![1.0; targets.len()])?;
                    let cos = tae::centroid::cosine_rows(t, z, v[3])?;
                    let m = t.mean(cos);
                    t.add(ce, m)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst violation of `|a - n| <= max(abs_floor, rel * max(|a|, |n|))` over
/// every input scalar, or `None` if every scalar passes. The graph output is
/// reduced to a scalar through a fixed random projection.
pub fn gradcheck(case: &GradCase, seed: u64, rel: f64, abs_floor: f64) -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let eval = |inputs: &[Tensor], proj: Option<&Tensor>| -> Result<(f64, Tensor, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let p = match proj {
            Some(p) => p.clone(),
            None => Tensor::new(shape.clone(), vec![0.0; shape.iter().product()]).unwrap(),
        };
        let pv = tape.constant(p.clone());
        let prod = tape.mul(out, pv)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = if proj.is_some() {
            let g = tape.backward(loss)?;
            Some(vars.iter().map(|&v| g.get(v)).collect())
        } else {
            None
        };
        Ok((value, p, grads))
    };
    let (_, zero, _) = eval(&case.inputs, None)?;
    let proj = away_from_zero(&mut rng, zero.shape());
    let (_, _, grads) = eval(&case.inputs, Some(&proj))?;
    let grads = grads.expect("requested");
    let h = 1e-6;
    let mut worst: Option<(f64, String)> = None;
    for (i, x) in case.inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fp = eval(&plus, Some(&proj))?.0;
            let fm = eval(&minus, Some(&proj))?.0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[i].data()[j];
            let tol = abs_floor.max(rel * analytic.abs().max(numeric.abs()));
            let err = (analytic - numeric).abs();
            if err > tol && worst.as_ref().is_none_or(|(w, _)| err / tol > *w) {
                worst = Some((
                    err / tol,
                    format!("{}: input {i} scalar {j}: analytic {analytic} numeric {numeric}", case.op),
                ));
            }
        }
    }
    Ok(worst.map(|(_, m)| m))
}

/// Independent forward/backward of `x -> relu(x W1 + b1) W2 + b2 -> head -> CE`
/// for a single sample, returning the gradient of every extractor scalar in
/// flat order `[W1, b1, W2, b2]`. `W1` is `[i, h]`, `Wh` is `[classes, d]`.
pub struct TinyMlp {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub wh: Vec<Vec<f64>>,
    pub bh: Vec<f64>,
}

impl TinyMlp {
    pub fn sample_grad(&self, x: &[f64], target: usize) -> Vec<f64> {
        let (i_dim, h_dim, d_dim) = (self.w1.len(), self.b1.len(), self.b2.len());
        let pre: Vec<f64> = (0..h_dim)
            .map(|j| self.b1[j] + (0..i_dim).map(|i| x[i] * self.w1[i][j]).sum::<f64>())
            .collect();
        let a: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let f: Vec<f64> = (0..d_dim)
            .map(|k| self.b2[k] + (0..h_dim).map(|j| a[j] * self.w2[j][k]).sum::<f64>())
            .collect();
        let z: Vec<f64> = self
            .wh
            .iter()
            .zip(&self.bh)
            .map(|(w, b)| b + w.iter().zip(&f).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let dz: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(c, v)| (v - m).exp() / s - if c == target { 1.0 } else { 0.0 })
            .collect();
        let df: Vec<f64> = (0..d_dim).map(|k| (0..dz.len()).map(|c| dz[c] * self.wh[c][k]).sum()).collect();
        let da: Vec<f64> = (0..h_dim)
            .map(|j| {
                if pre[j] > 0.0 {
                    (0..d_dim).map(|k| df[k] * self.w2[j][k]).sum()
                } else {
                    0.0
                }
            })
            .collect();
        let mut g = Vec::new();
        for i in 0..i_dim {
            for j in 0..h_dim {
                g.push(x[i] * da[j]);
            }
        }
        g.extend(&da);
        for j in 0..h_dim {
            for k in 0..d_dim {
                g.push(a[j] * df[k]);
            }
        }
        g.extend(&df);
        g
    }
}

impl TinyMlp {
    /// Copies the weights of a one-hidden-layer MLP extractor and its head.
    pub fn from_models(ex: &tae::models::FeatureExtractor, head: &tae::models::ClassifierHead) -> Self {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        let s = ex.store();
        let (mut wh, mut bh) = (Vec::new(), Vec::new());
        for (name, t) in head.store().iter() {
            if name.starts_with("head.weight") {
                wh.extend(rows(t));
            } else {
                bh.extend_from_slice(t.data());
            }
        }
        Self {
            w1: rows(s.get("fc0.weight").unwrap()),
            b1: s.get("fc0.bias").unwrap().data().to_vec(),
            w2: rows(s.get("fc1.weight").unwrap()),
            b2: s.get("fc1.bias").unwrap().data().to_vec(),
            wh,
            bh,
        }
    }

    /// Accumulated sensitivity recomputed from per-sample gradients: each
    /// mini-batch gradient is the mean of its sample gradients, and the
    /// accumulated value is `sum |batch grad|` over every pass, divided by the
    /// pass count.
    pub fn brute_sensitivity(&self, xs: &[Vec<f64>], targets: &[usize], batch: usize, passes: usize) -> Vec<f64> {
        let n = self.sample_grad(&xs[0], targets[0]).len();
        let mut acc = vec![0.0; n];
        for _ in 0..passes {
            for start in (0..xs.len()).step_by(batch) {
                let end = (start + batch).min(xs.len());
                let mut g = vec![0.0; n];
                for s in start..end {
                    for (gi, v) in g.iter_mut().zip(self.sample_grad(&xs[s], targets[s])) {
                        *gi += v;
                    }
                }
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += (v / (end - start) as f64).abs();
                }
            }
        }
        acc.iter().map(|a| a / passes as f64).collect()
    }
}

/// `ceil(pct * n / 100)` in integer arithmetic.
pub fn ceil_percent(pct: usize, n: usize) -> usize {
    (pct * n).div_ceil(100)
}

/// Reference top-k: stable sort by descending score, lower index first on ties.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

/// Exhaustive greedy herding: at every step score each remaining candidate
/// by the distance between the class mean and the mean of the chosen set
/// plus that candidate.
pub fn herding_oracle(rows: &[Vec<f64>], budget: usize) -> Vec<usize> {
    let n = rows.len();
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < budget.min(n) {
        let mut best = None;
        for c in 0..n {
            if chosen.contains(&c) {
                continue;
            }
            let k = chosen.len() as f64 + 1.0;
            let dist: f64 = (0..d)
                .map(|j| {
                    let s: f64 = chosen.iter().map(|&i| rows[i][j]).sum::<f64>() + rows[c][j];
                    (mu[j] - s / k).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            match best {
                Some((_, b)) if dist >= b => {}
                _ => best = Some((c, dist)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}
