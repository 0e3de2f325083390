use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected ADAM update applied in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam state tracks {} tensors, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if !p.same_shape(g) || !p.same_shape(m) {
            return Err(Error::Shape(format!("adam: param {:?}, grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::powf(beta1, t as f32);
    let bc2 = 1.0 - libm::powf(beta2, t as f32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            pd[i] -= lr * mh / (libm::sqrtf(vh) + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let g = Tensor::zeros(&[1, 3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[1, 3]]);
        for _ in 0..10 {
            adam_step(&mut st, &mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(st.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut w = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&[1]]);
        adam_step(&mut st, &mut [&mut w], &[&g]).unwrap();
        let expected = -0.01f64 * 1.0 / (1.0 + 1e-8);
        assert!((w.data()[0] as f64 - expected).abs() < 1e-8);
    }

    #[test]
    fn quadratic_converges_monotonically_after_burn_in() {
        // scalar reference recurrence in f64
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w64, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut w = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &[&[1]]);
        let mut dists = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            adam_step(&mut st, &mut [&mut w], &[&Tensor::scalar(g)]).unwrap();
            let g64 = 2.0 * (w64 - 3.0);
            m = b1 * m + (1.0 - b1) * g64;
            v = b2 * v + (1.0 - b2) * g64 * g64;
            w64 -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((w.data()[0] as f64 - w64).abs() < 1e-4);
            dists.push((w.data()[0] - 3.0).abs());
        }
        for pair in dists[10..].windows(2) {
            assert!(pair[1] <= pair[0], "{:?}", pair);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[2]]);
        assert!(adam_step(&mut st, &mut [&mut w], &[&g]).is_err());
    }
}
