// Forward and backward kernels for the supported op set. All matrices are
// row-major with rows indexing (sample, token) pairs.

use crate::tensor::{axpy, dot};

const SQRT_2_INV: f32 = core::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;
pub(crate) const LN_EPS: f32 = 1e-5;

/// `y[r, o] = sum_i x[r, i] * w[o, i]`
pub(crate) fn matmul_fwd(x: &[f32], w: &[f32], rows: usize, inp: usize, out: usize, y: &mut [f32]) {
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * inp..(o + 1) * inp]);
        }
    }
}

/// Accumulates `dx += dy * w` and `dw += dy^T * x`.
pub(crate) fn matmul_bwd(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    rows: usize,
    inp: usize,
    out: usize,
    dx: Option<&mut [f32]>,
    dw: &mut [f32],
) {
    if let Some(dx) = dx {
        for r in 0..rows {
            let dxr = &mut dx[r * inp..(r + 1) * inp];
            for o in 0..out {
                let g = dy[r * out + o];
                if g != 0.0 {
                    axpy(g, &w[o * inp..(o + 1) * inp], dxr);
                }
            }
        }
    }
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dy[r * out + o];
            if g != 0.0 {
                axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
            }
        }
    }
}

#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * SQRT_2_INV))
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * SQRT_2_INV));
    let pdf = INV_SQRT_2PI * libm::expf(-0.5 * x * x);
    cdf + x * pdf
}

pub(crate) fn softmax_row(x: &[f32], y: &mut [f32]) {
    let m = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0f32;
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = libm::expf(xi - m);
        s += *yi;
    }
    let inv = 1.0 / s;
    y.iter_mut().for_each(|v| *v *= inv);
}

/// `dx += y * (dy - <dy, y>)` for one softmax row.
pub(crate) fn softmax_row_bwd(y: &[f32], dy: &[f32], dx: &mut [f32]) {
    let s = dot(y, dy);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d += yi * (gi - s);
    }
}

/// Row-wise layer norm. `stats` receives `(mean, rstd)` per row.
pub(crate) fn layernorm_fwd(x: &[f32], gamma: &[f32], beta: &[f32], cols: usize, y: &mut [f32], stats: &mut [f32]) {
    let rows = x.len() / cols;
    let n = cols as f32;
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f32>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let rstd = 1.0 / libm::sqrtf(var + LN_EPS);
        stats[2 * r] = mean;
        stats[2 * r + 1] = rstd;
        let yr = &mut y[r * cols..(r + 1) * cols];
        for c in 0..cols {
            yr[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_bwd(
    x: &[f32],
    gamma: &[f32],
    stats: &[f32],
    dy: &[f32],
    cols: usize,
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let rows = x.len() / cols;
    let n = cols as f32;
    let mut xhat = alloc::vec![0.0f32; cols];
    let mut dxhat = alloc::vec![0.0f32; cols];
    for r in 0..rows {
        let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
        let xr = &x[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut m1 = 0.0f32;
        let mut m2 = 0.0f32;
        for c in 0..cols {
            xhat[c] = (xr[c] - mean) * rstd;
            dxhat[c] = dyr[c] * gamma[c];
            dgamma[c] += dyr[c] * xhat[c];
            dbeta[c] += dyr[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
        }
        m1 /= n;
        m2 /= n;
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dxr[c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
        }
    }
}

/// Single-head scaled dot-product attention applied independently to each
/// group of `tokens` consecutive rows. `probs` receives the attention matrix
/// of every group (`groups * tokens * tokens`).
pub(crate) fn attention_fwd(q: &[f32], k: &[f32], v: &[f32], d: usize, tokens: usize, out: &mut [f32], probs: &mut [f32]) {
    let groups = q.len() / (d * tokens);
    let scale = 1.0 / libm::sqrtf(d as f32);
    let mut scores = alloc::vec![0.0f32; tokens];
    for g in 0..groups {
        let base = g * tokens;
        for i in 0..tokens {
            let qi = &q[(base + i) * d..(base + i + 1) * d];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k[(base + j) * d..(base + j + 1) * d]) * scale;
            }
            let p = &mut probs[(g * tokens + i) * tokens..(g * tokens + i + 1) * tokens];
            softmax_row(&scores, p);
            let o = &mut out[(base + i) * d..(base + i + 1) * d];
            o.iter_mut().for_each(|x| *x = 0.0);
            for (j, &pj) in p.iter().enumerate() {
                axpy(pj, &v[(base + j) * d..(base + j + 1) * d], o);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_bwd(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    d: usize,
    tokens: usize,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let groups = q.len() / (d * tokens);
    let scale = 1.0 / libm::sqrtf(d as f32);
    let mut dp = alloc::vec![0.0f32; tokens];
    let mut ds = alloc::vec![0.0f32; tokens];
    for g in 0..groups {
        let base = g * tokens;
        for i in 0..tokens {
            let p = &probs[(g * tokens + i) * tokens..(g * tokens + i + 1) * tokens];
            let doi = &dout[(base + i) * d..(base + i + 1) * d];
            for j in 0..tokens {
                dp[j] = dot(doi, &v[(base + j) * d..(base + j + 1) * d]);
                axpy(p[j], doi, &mut dv[(base + j) * d..(base + j + 1) * d]);
            }
            ds.iter_mut().for_each(|x| *x = 0.0);
            softmax_row_bwd(p, &dp, &mut ds);
            for j in 0..tokens {
                let s = ds[j] * scale;
                if s != 0.0 {
                    let kj = &k[(base + j) * d..(base + j + 1) * d];
                    axpy(s, kj, &mut dq[(base + i) * d..(base + i + 1) * d]);
                    let qi = &q[(base + i) * d..(base + i + 1) * d];
                    axpy(s, qi, &mut dk[(base + j) * d..(base + j + 1) * d]);
                }
            }
        }
    }
}
