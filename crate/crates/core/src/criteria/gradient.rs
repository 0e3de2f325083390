use alloc::vec;
use alloc::vec::Vec;
use rand_distr::{Distribution, StandardNormal};

use super::engine::Engine;
use super::{CriterionConfig, GRADCAM_EPS};
use crate::error::bail_arg;
use crate::modelzoo::{Split, TrainedModel};
use crate::rng::{rng_from, tag};
use crate::tensor::Tensor;
use crate::Result;

/// The weights themselves.
pub fn crit_weights(model: &TrainedModel) -> Vec<Tensor> {
    model.layers.iter().map(|h| model.graph.param(h.weight).clone()).collect()
}

/// `E_X[df/dw_l]`.
pub fn crit_grad(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    let mut e = Engine::new(model, calib, config.target)?;
    e.backward()?;
    Ok((0..model.num_layers()).map(|l| e.mean_grad(l)).collect())
}

/// `E_X[w_l * df/dw_l]`. The weights do not depend on the sample, so the
/// mean of products equals the weights times the mean gradient.
pub fn crit_weight_times_grad(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    let grads = crit_grad(model, calib, config)?;
    grads
        .into_iter()
        .zip(&model.layers)
        .map(|(g, h)| g.zip_map(model.graph.param(h.weight), |g, w| g * w))
        .collect()
}

/// `E_X[g^2 / (2 g^2 + w g^3 + eps)]` with per-sample gradients `g`.
pub fn crit_gradcampp(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    let mut e = Engine::new(model, calib, config.target)?;
    e.backward()?;
    let mut maps = Vec::with_capacity(model.num_layers());
    for l in 0..model.num_layers() {
        let w = e.weight(l).clone();
        let mut acc = vec![0.0f64; w.numel()];
        let mut g = vec![0.0f32; w.numel()];
        for s in 0..e.n {
            e.sample_grad(l, s, &mut g)?;
            for ((a, &gi), &wi) in acc.iter_mut().zip(&g).zip(w.data()) {
                let (gi, wi) = (gi as f64, wi as f64);
                let g2 = gi * gi;
                *a += g2 / (2.0 * g2 + wi * g2 * gi + GRADCAM_EPS);
            }
        }
        let inv = 1.0 / e.n as f64;
        maps.push(Tensor::new(w.shape().to_vec(), acc.iter().map(|a| (a * inv) as f32).collect())?);
    }
    Ok(maps)
}

/// First and second moments of per-sample gradients over the calibration
/// set and `n_noise` joint Gaussian perturbations of every layer's weights
/// (std `sigma_rel * (max w_l - min w_l)`). Draw seeds depend only on
/// `(seed, layer, draw)`, so SmoothGrad and VarGrad see identical noise.
pub fn noise_moments(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if config.n_noise == 0 {
        bail_arg!("n_noise must be positive");
    }
    let mut e = Engine::new(model, calib, config.target)?;
    let n_layers = model.num_layers();
    let clean: Vec<Tensor> = (0..n_layers).map(|l| e.weight(l).clone()).collect();
    let sigmas: Vec<f32> = clean
        .iter()
        .map(|w| {
            let (lo, hi) = w.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            config.sigma_rel * (hi - lo)
        })
        .collect();
    let mut m1: Vec<Vec<f64>> = clean.iter().map(|w| vec![0.0; w.numel()]).collect();
    let mut m2 = m1.clone();
    let mut g = Vec::new();
    for draw in 0..config.n_noise {
        for l in 0..n_layers {
            let mut rng = rng_from(config.seed, &[tag("weight-noise"), l as u64, draw as u64]);
            let sigma = sigmas[l];
            let w = e.weight_mut(l);
            for (v, &c) in w.data_mut().iter_mut().zip(clean[l].data()) {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v = c + sigma * z;
            }
        }
        e.eval_all()?;
        e.backward()?;
        for l in 0..n_layers {
            g.resize(clean[l].numel(), 0.0);
            for s in 0..e.n {
                e.sample_grad(l, s, &mut g)?;
                for ((a, b), &gi) in m1[l].iter_mut().zip(m2[l].iter_mut()).zip(&g) {
                    *a += gi as f64;
                    *b += (gi as f64) * (gi as f64);
                }
            }
        }
    }
    let inv = 1.0 / (config.n_noise * e.n) as f64;
    let mut means = Vec::with_capacity(n_layers);
    let mut vars = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let shape = clean[l].shape().to_vec();
        let mean: Vec<f64> = m1[l].iter().map(|a| a * inv).collect();
        let var: Vec<f32> = m2[l].iter().zip(&mean).map(|(b, m)| (b * inv - m * m).max(0.0) as f32).collect();
        means.push(Tensor::new(shape.clone(), mean.iter().map(|&m| m as f32).collect())?);
        vars.push(Tensor::new(shape, var)?);
    }
    Ok((means, vars))
}

/// `E_{X,N}[df/d(w_l + N)]`.
pub fn crit_smoothgrad(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    Ok(noise_moments(model, calib, config)?.0)
}

/// `Var_{X,N}[df/d(w_l + N)]` (population variance over all samples and
/// draws). Needs at least two noise draws.
pub fn crit_vargrad(model: &TrainedModel, calib: &Split, config: &CriterionConfig) -> Result<Vec<Tensor>> {
    if config.n_noise < 2 {
        bail_arg!("vargrad needs n_noise >= 2, got {}", config.n_noise);
    }
    Ok(noise_moments(model, calib, config)?.1)
}
