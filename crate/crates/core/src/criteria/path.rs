use alloc::vec;
use alloc::vec::Vec;

use super::engine::Engine;
use super::CriterionConfig;
use crate::error::bail_arg;
use crate::modelzoo::{Split, TrainedModel};
use crate::tensor::{axpy, Tensor};
use crate::Result;

/// Integrated gradients along `lambda * w_l`, one layer at a time with the
/// other layers held fixed. Midpoint rule with `ig_steps` points; the map
/// is the path-averaged mean gradient, so `<w_l, map>` approximates
/// `f(w) - f(w with w_l = 0)`.
pub fn crit_ig(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    let k = config.ig_steps;
    if k == 0 {
        bail_arg!("ig_steps must be positive");
    }
    let mut e = Engine::new(model, calib, config.target)?;
    let mut maps = vec![Tensor::default(); model.num_layers()];
    for l in (0..model.num_layers()).rev() {
        let w = e.weight(l).clone();
        let mut acc = Tensor::zeros(w.shape());
        for step in 0..k {
            let lambda = (step as f32 + 0.5) / k as f32;
            *e.weight_mut(l) = w.map(|v| v * lambda);
            e.eval_layer(l)?;
            e.backward_layer(l)?;
            axpy(1.0 / (k * e.n) as f32, e.graph.grad(e.layers[l].weight).data(), acc.data_mut());
        }
        *e.weight_mut(l) = w;
        maps[l] = acc;
    }
    Ok(maps)
}

/// Iterations taken by the guided path of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GigTrace {
    pub iterations: usize,
    /// Coordinates not yet at the baseline when the loop stopped (always 0).
    pub unconverged: usize,
    /// Iteration (1-based) at which each coordinate reached the baseline.
    pub reached: Vec<usize>,
}

/// Guided integrated gradients with a fixed shrink schedule, sharing one
/// path across the calibration set.
///
/// Every coordinate travels from `w_i` to 0 in `gig_steps` equal notches.
/// Each iteration advances by one notch the `ceil(gig_shrink * N)`
/// unconverged coordinates with the smallest batch-mean gradient magnitude
/// (ties by index), evaluates the gradient at the midpoint of that move and
/// credits it to the moved coordinates. The first selection uses the
/// gradient at `w`, later ones the previous midpoint gradient.
pub fn crit_gig(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    Ok(gig_trace(model, calib, config)?.into_iter().map(|(m, _)| m).collect())
}

pub fn gig_trace(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<(Tensor, GigTrace)>> {
    let k = config.gig_steps;
    let f = config.gig_shrink;
    if k == 0 {
        bail_arg!("gig_steps must be positive");
    }
    if !(f > 0.0 && f <= 1.0) {
        bail_arg!("gig shrink fraction {f} outside (0, 1]");
    }
    let mut e = Engine::new(model, calib, config.target)?;
    e.backward()?;
    let first_grads: Vec<Tensor> = (0..model.num_layers()).map(|l| e.mean_grad(l)).collect();
    let mut out = vec![(Tensor::default(), GigTrace { iterations: 0, unconverged: 0, reached: Vec::new() }); model.num_layers()];
    for l in (0..model.num_layers()).rev() {
        let w = e.weight(l).clone();
        let n = w.numel();
        let per_iter = (libm::ceilf(f * n as f32) as usize).clamp(1, n);
        let mut left = vec![k; n];
        let mut unconverged: Vec<usize> = (0..n).collect();
        let mut point = w.clone();
        let mut grad = first_grads[l].clone();
        let mut acc = vec![0.0f64; n];
        let mut iterations = 0;
        let mut reached = vec![0; n];
        while !unconverged.is_empty() {
            let take = per_iter.min(unconverged.len());
            let key = |i: &usize| (grad.data()[*i].abs(), *i);
            unconverged.select_nth_unstable_by(take - 1, |a, b| {
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
            });
            let chosen: Vec<usize> = unconverged[..take].to_vec();
            let mut mid = point.clone();
            for &i in &chosen {
                mid.data_mut()[i] = w.data()[i] * (left[i] as f32 - 0.5) / k as f32;
                left[i] -= 1;
                point.data_mut()[i] = w.data()[i] * left[i] as f32 / k as f32;
            }
            *e.weight_mut(l) = mid;
            e.eval_layer(l)?;
            e.backward_layer(l)?;
            grad = e.mean_grad(l);
            for &i in &chosen {
                acc[i] += grad.data()[i] as f64 / k as f64;
            }
            iterations += 1;
            for &i in &chosen {
                if left[i] == 0 {
                    reached[i] = iterations;
                }
            }
            unconverged.retain(|&i| left[i] > 0);
        }
        *e.weight_mut(l) = w.clone();
        let map = Tensor::new(w.shape().to_vec(), acc.iter().map(|&a| a as f32).collect())?;
        out[l] = (map, GigTrace { iterations, unconverged: unconverged.len(), reached });
    }
    Ok(out)
}

/// Important-direction integrated gradients on the straight path from 0 to
/// `w_l` with `idgi_steps` segments. On each segment the per-sample output
/// change is spread over coordinates in proportion to the squared gradient
/// at the segment start; segments with a zero gradient contribute nothing.
pub fn crit_idgi(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    Ok(idgi_layers(model, calib, config)?.into_iter().map(|(m, _)| m).collect())
}

/// IDGI maps together with, per layer and sample, the summed increments
/// and `f(w) - f(w_l = 0)`.
pub fn idgi_layers(
    model: &TrainedModel,
    calib: &Split,
    config: &CriterionConfig,
) -> Result<Vec<(Tensor, Vec<(f64, f64)>)>> {
    let k = config.idgi_steps;
    if k == 0 {
        bail_arg!("idgi_steps must be positive");
    }
    let mut e = Engine::new(model, calib, config.target)?;
    let mut out = vec![(Tensor::default(), Vec::new()); model.num_layers()];
    for l in (0..model.num_layers()).rev() {
        let w = e.weight(l).clone();
        let at = |step: usize| w.map(|v| v * step as f32 / k as f32);
        // f at every point of the path
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
        for step in 0..=k {
            *e.weight_mut(l) = at(step);
            e.eval_layer(l)?;
            values.push(e.scalars()?);
        }
        let mut acc = vec![0.0f64; w.numel()];
        let mut totals = vec![0.0f64; e.n];
        let mut g = vec![0.0f32; w.numel()];
        for step in 0..k {
            *e.weight_mut(l) = at(step);
            e.eval_layer(l)?;
            e.backward_layer(l)?;
            for s in 0..e.n {
                let d = values[step + 1][s] - values[step][s];
                e.sample_grad(l, s, &mut g)?;
                let norm: f64 = g.iter().map(|&v| (v as f64) * (v as f64)).sum();
                if norm == 0.0 || d == 0.0 {
                    continue;
                }
                let scale = d / norm;
                let mut total = 0.0;
                for (a, &gi) in acc.iter_mut().zip(&g) {
                    let inc = (gi as f64) * (gi as f64) * scale;
                    *a += inc;
                    total += inc;
                }
                totals[s] += total;
            }
        }
        *e.weight_mut(l) = w.clone();
        let inv = 1.0 / e.n as f64;
        let map = Tensor::new(w.shape().to_vec(), acc.iter().map(|&a| (a * inv) as f32).collect())?;
        let pairs = (0..e.n).map(|s| (totals[s], values[k][s] - values[0][s])).collect();
        out[l] = (map, pairs);
    }
    Ok(out)
}
