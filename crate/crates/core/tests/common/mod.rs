//! Independent f64 interpreter for graphs, used as a forward and
//! finite-difference oracle.

#![allow(dead_code)]

use layersense_core::autograd::{Graph, Op, ParamId};
use layersense_core::modelzoo::{build, train, Family, ModelSpec, MoonsDataset, SplitSizes, TrainConfig, TrainedModel};
use layersense_core::Tensor;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = if t.shape().len() == 2 { (t.shape()[0], t.shape()[1]) } else { (1, t.numel()) };
        Self { rows, cols, data: t.data().iter().map(|&v| v as f64).collect() }
    }
}

/// Parameters of `g` widened to f64, indexed by parameter id.
pub fn params64(g: &Graph) -> Vec<Mat> {
    g.param_ids().map(|p| Mat::from_tensor(g.param(p))).collect()
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Evaluates every node of `g` in f64 with the given parameters.
pub fn forward64(g: &Graph, params: &[Mat], input: &Mat) -> Vec<Mat> {
    let ops = g.ops();
    let mut vals: Vec<Mat> = Vec::with_capacity(ops.len());
    let p = |id: ParamId| &params[id.0];
    for op in ops {
        let v = match *op {
            Op::Input => input.clone(),
            Op::Tokens { x } => {
                let xv = &vals[x.0];
                Mat { rows: xv.data.len(), cols: 1, data: xv.data.clone() }
            }
            Op::MatMul { x, w } => {
                let (xv, wv) = (&vals[x.0], p(w));
                let mut y = Mat::zeros(xv.rows, wv.rows);
                for r in 0..xv.rows {
                    for o in 0..wv.rows {
                        y.data[r * wv.rows + o] = xv.row(r).iter().zip(wv.row(o)).map(|(a, b)| a * b).sum();
                    }
                }
                y
            }
            Op::BiasAdd { x, b } => {
                let mut y = vals[x.0].clone();
                for r in 0..y.rows {
                    for c in 0..y.cols {
                        y.data[r * y.cols + c] += p(b).data[c];
                    }
                }
                y
            }
            Op::AddPositional { x, pos, tokens } => {
                let mut y = vals[x.0].clone();
                for r in 0..y.rows {
                    for c in 0..y.cols {
                        y.data[r * y.cols + c] += p(pos).row(r % tokens)[c];
                    }
                }
                y
            }
            Op::Add { a, b } => {
                let mut y = vals[a.0].clone();
                for (o, v) in y.data.iter_mut().zip(&vals[b.0].data) {
                    *o += v;
                }
                y
            }
            Op::Gate { x, gate } => {
                let g_val = g.gates()[gate] as f64;
                let mut y = vals[x.0].clone();
                y.data.iter_mut().for_each(|v| *v *= g_val);
                y
            }
            Op::Relu { x } => {
                let mut y = vals[x.0].clone();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            Op::Gelu { x } => {
                let mut y = vals[x.0].clone();
                y.data.iter_mut().for_each(|v| *v = gelu(*v));
                y
            }
            Op::Softmax { x } => {
                let xv = &vals[x.0];
                let mut y = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    y.data[r * xv.cols..(r + 1) * xv.cols].copy_from_slice(&softmax(xv.row(r)));
                }
                y
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &vals[x.0];
                let mut y = Mat::zeros(xv.rows, xv.cols);
                let n = xv.cols as f64;
                for r in 0..xv.rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + 1e-5).sqrt();
                    for c in 0..xv.cols {
                        y.data[r * xv.cols + c] = (row[c] - mean) * rstd * p(gamma).data[c] + p(beta).data[c];
                    }
                }
                y
            }
            Op::MeanPool { x, tokens } => {
                let xv = &vals[x.0];
                let mut y = Mat::zeros(xv.rows / tokens, xv.cols);
                for r in 0..xv.rows {
                    for c in 0..xv.cols {
                        y.data[(r / tokens) * xv.cols + c] += xv.row(r)[c] / tokens as f64;
                    }
                }
                y
            }
            Op::Attention { q, k, v, tokens } => {
                let (qv, kv, vv) = (&vals[q.0], &vals[k.0], &vals[v.0]);
                let d = qv.cols;
                let scale = 1.0 / (d as f64).sqrt();
                let mut y = Mat::zeros(qv.rows, d);
                for g0 in (0..qv.rows).step_by(tokens) {
                    for i in 0..tokens {
                        let s: Vec<f64> = (0..tokens)
                            .map(|j| qv.row(g0 + i).iter().zip(kv.row(g0 + j)).map(|(a, b)| a * b).sum::<f64>() * scale)
                            .collect();
                        let pr = softmax(&s);
                        for j in 0..tokens {
                            for c in 0..d {
                                y.data[(g0 + i) * d + c] += pr[j] * vv.row(g0 + j)[c];
                            }
                        }
                    }
                }
                y
            }
        };
        vals.push(v);
    }
    vals
}

pub fn logits64(g: &Graph, params: &[Mat], input: &Mat) -> Mat {
    let out = g.output().expect("graph has an output");
    forward64(g, params, input).swap_remove(out.0)
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy64(logits: &Mat, labels: &[usize]) -> f64 {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .sum::<f64>()
        / logits.rows as f64
}

pub fn input64(x: &Tensor) -> Mat {
    Mat::from_tensor(x)
}

/// Small dataset shared by the integration tests.
pub fn moons(train: usize, test: usize, seed: u64) -> MoonsDataset {
    MoonsDataset::generate(SplitSizes { train, test }, 0.1, seed).unwrap()
}

pub fn trained(spec: &ModelSpec, data: &MoonsDataset, epochs: usize) -> TrainedModel {
    train(build(spec).unwrap(), data, &TrainConfig { epochs, ..TrainConfig::default() }).unwrap()
}

pub fn spec(family: Family, widths: &[usize], seed: u64) -> ModelSpec {
    ModelSpec::new(family, widths.to_vec(), seed)
}

/// Largest relative error between backward-pass gradients of the mean
/// cross-entropy and f64 central differences, over up to `per_param`
/// sampled coordinates of every parameter. The denominator is floored at
/// 1% of the tensor's largest gradient and at 1e-5, so coordinates with
/// vanishing gradient are judged on an absolute scale near f32 resolution.
pub fn grad_check(g: &mut Graph, x: &Tensor, labels: &[usize], per_param: usize, seed: u64) -> f64 {
    use layersense_core::autograd::OutputSelector;
    use rand::{Rng, SeedableRng};
    g.forward(x).unwrap();
    g.backward(&OutputSelector::cross_entropy(labels.to_vec())).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = params64(g);
    let input = input64(x);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for p in g.param_ids().collect::<Vec<_>>() {
        let grad = g.grad(p).data().to_vec();
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let n = grad.len();
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.gen_range(0..n)).collect() };
        for i in coords {
            let mut plus = base.clone();
            plus[p.0].data[i] += h;
            let mut minus = base.clone();
            minus[p.0].data[i] -= h;
            let fd = (cross_entropy64(&logits64(g, &plus, &input), labels)
                - cross_entropy64(&logits64(g, &minus, &input), labels))
                / (2.0 * h);
            let err = (grad[i] as f64 - fd).abs() / fd.abs().max(0.01 * scale).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}
