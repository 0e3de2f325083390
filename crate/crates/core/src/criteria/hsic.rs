use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use super::engine::Engine;
use super::CriterionConfig;
use crate::error::bail_arg;
use crate::modelzoo::{Split, TrainedModel};
use crate::perturb::mean_logit_distance;
use crate::rng::{rng_from, tag};
use crate::tensor::Tensor;
use crate::Result;

/// Smallest number of masks accepted.
pub const MIN_MASKS: usize = 16;

/// Median of the nonzero pairwise distances `|r_i - r_j|`, or 0 when all
/// responses coincide.
pub fn median_bandwidth(responses: &[f64]) -> f64 {
    let mut d = Vec::with_capacity(responses.len() * responses.len().saturating_sub(1) / 2);
    for (i, &a) in responses.iter().enumerate() {
        for &b in &responses[i + 1..] {
            let v = (a - b).abs();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Biased HSIC between each column of `masks` (delta kernel on the bit)
/// and `responses` (Gaussian kernel with median-heuristic bandwidth).
///
/// `masks[m][g]` is the bit of group `g` in draw `m`. With `L~` the doubly
/// centred response kernel and `b` a group's bit vector, the delta kernel
/// gives `HSIC = 2 b' L~ b / M^2`.
pub fn hsic_group_scores(masks: &[Vec<bool>], responses: &[f64]) -> Vec<f64> {
    let m = responses.len();
    let groups = masks.first().map_or(0, |r| r.len());
    let sigma = median_bandwidth(responses);
    if m == 0 || sigma == 0.0 {
        return vec![0.0; groups];
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            let d = responses[i] - responses[j];
            k[i * m + j] = libm::exp(-d * d * inv);
        }
    }
    let row_mean: Vec<f64> = (0..m).map(|i| k[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let all_mean = row_mean.iter().sum::<f64>() / m as f64;
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] += all_mean - row_mean[i] - row_mean[j];
        }
    }
    let mut scores = vec![0.0f64; groups];
    let mut on = Vec::with_capacity(m);
    for (g, score) in scores.iter_mut().enumerate() {
        on.clear();
        on.extend((0..m).filter(|&i| masks[i][g]));
        let mut s = 0.0;
        for &i in &on {
            let row = &k[i * m..(i + 1) * m];
            s += on.iter().map(|&j| row[j]).sum::<f64>();
        }
        *score = (2.0 * s / (m * m) as f64).max(0.0);
    }
    scores
}

/// Per-neuron HSIC scores. For each layer, `hsic_masks` random masks keep
/// each output row of the weight with probability 1/2 (the bias is kept);
/// the response to a mask is the mean L2 distance between masked and clean
/// logits over the calibration set.
pub fn crit_hsic(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    if config.hsic_masks < MIN_MASKS {
        bail_arg!("hsic needs at least {MIN_MASKS} masks, got {}", config.hsic_masks);
    }
    let mut e = Engine::new(model, calib, config.target)?;
    let mut maps = vec![Tensor::default(); model.num_layers()];
    for l in (0..model.num_layers()).rev() {
        let w = e.weight(l).clone();
        let (rows, cols) = (w.rows(), w.cols());
        let mut masks = Vec::with_capacity(config.hsic_masks);
        let mut responses = Vec::with_capacity(config.hsic_masks);
        for m in 0..config.hsic_masks {
            let mut rng = rng_from(config.seed, &[tag("hsic"), l as u64, m as u64]);
            let bits: Vec<bool> = (0..rows).map(|_| rng.gen::<bool>()).collect();
            let masked = e.weight_mut(l);
            masked.data_mut().copy_from_slice(w.data());
            for (r, &keep) in bits.iter().enumerate() {
                if !keep {
                    masked.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                }
            }
            let out = e.eval_layer(l)?.clone();
            responses.push(mean_logit_distance(&out, &e.clean_logits) as f64);
            masks.push(bits);
        }
        *e.weight_mut(l) = w;
        let scores = hsic_group_scores(&masks, &responses);
        maps[l] = Tensor::new(vec![rows], scores.iter().map(|&s| s as f32).collect())?;
    }
    Ok(maps)
}
