// Terminal objectives. Each returns the summed per-sample loss and the
// gradient of that sum with respect to the logits / predictions.

use crate::tensor::Tensor;

pub(crate) fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let cols = logits.cols();
    let mut grad = Tensor::zeros(&[logits.rows(), cols]);
    let mut total = 0.0f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0f64;
        for &v in row {
            z += libm::exp((v - m) as f64);
        }
        let lse = m as f64 + libm::log(z);
        total += lse - row[y] as f64;
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (libm::exp(row[c] as f64 - lse)) as f32;
        }
        g[y] -= 1.0;
    }
    (total, grad)
}

pub(crate) fn mse_sum(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let mut total = 0.0f64;
    let cols = pred.cols().max(1) as f32;
    let grad = Tensor::from_fn(pred.shape(), |i| {
        let d = pred.data()[i] - target.data()[i];
        total += (d as f64) * (d as f64) / cols as f64;
        2.0 * d / cols
    });
    (total, grad)
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let n = labels.len().max(1) as f32;
    let (sum, mut g) = cross_entropy_sum(logits, labels);
    g.data_mut().iter_mut().for_each(|v| *v /= n);
    ((sum / n as f64) as f32, g)
}

/// Mean (over samples) of the per-sample mean squared error, and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f32, Tensor) {
    let n = pred.rows().max(1) as f32;
    let (sum, mut g) = mse_sum(pred, target);
    g.data_mut().iter_mut().for_each(|v| *v /= n);
    ((sum / n as f64) as f32, g)
}
