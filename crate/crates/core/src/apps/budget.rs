use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::reduce::argsort_desc;
use crate::{Error, Result};

/// Largest rate assigned to a single layer.
pub const MAX_RATE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRates {
    pub rates: Vec<f64>,
    /// Layers held at [`MAX_RATE`].
    pub clamped: Vec<bool>,
}

/// Distributes a global pruning rate `gamma` over layers in proportion to
/// their expendability: `gamma_l = alpha * gamma * e_l`, with `alpha` chosen
/// so that `sum gamma_l * size_l = gamma * sum size_l`. Rates above
/// [`MAX_RATE`] are clamped and the remainder re-spread over the other
/// layers until no rate exceeds the cap.
pub fn allocate_rates(expendability: &[f64], sizes: &[usize], gamma: f64) -> Result<PruneRates> {
    let n = expendability.len();
    if n == 0 || sizes.len() != n {
        return Err(Error::InvalidArgument(format!("{n} expendabilities for {} layer sizes", sizes.len())));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("global rate {gamma} outside [0, 1)")));
    }
    if expendability.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidArgument("expendabilities must be finite and non-negative".into()));
    }
    let mut clamped = vec![false; n];
    if gamma == 0.0 {
        return Ok(PruneRates { rates: vec![0.0; n], clamped });
    }
    let omega: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let total: f64 = omega.iter().sum();
    for _ in 0..=n {
        let held: f64 = (0..n).filter(|&l| clamped[l]).map(|l| MAX_RATE * omega[l]).sum();
        let spread: f64 = (0..n).filter(|&l| !clamped[l]).map(|l| expendability[l] * omega[l]).sum();
        if spread <= 0.0 {
            return Err(Error::Infeasible(format!("no layer can absorb a global rate of {gamma}")));
        }
        let alpha = (gamma * total - held) / (gamma * spread);
        let rates: Vec<f64> =
            (0..n).map(|l| if clamped[l] { MAX_RATE } else { alpha * gamma * expendability[l] }).collect();
        let over: Vec<usize> = (0..n).filter(|&l| !clamped[l] && rates[l] > MAX_RATE).collect();
        if over.is_empty() {
            return Ok(PruneRates { rates, clamped });
        }
        for l in over {
            clamped[l] = true;
        }
    }
    Err(Error::Infeasible(format!("global rate {gamma} exceeds what the {MAX_RATE} per-layer cap allows")))
}

/// Pruning rates from sensitivities: expendability is
/// `1 / (s_l + 1e-6 * max s)`, uniform when every score is zero.
pub fn pruning_budget(scores: &[f32], sizes: &[usize], gamma: f64) -> Result<PruneRates> {
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidArgument("scores must be finite and non-negative".into()));
    }
    let max = scores.iter().fold(0.0f64, |m, &s| m.max(s as f64));
    let e: Vec<f64> = if max == 0.0 {
        vec![1.0; scores.len()]
    } else {
        scores.iter().map(|&s| 1.0 / (s as f64 + 1e-6 * max)).collect()
    };
    allocate_rates(&e, sizes, gamma)
}

/// Mixed-precision thirds: the least sensitive third of the layers gets
/// `target - 1` bits, the most sensitive third `target + 1`, the rest
/// `target`. With fewer than three layers every layer gets `target` and the
/// second value is `true`.
pub fn quantization_budget(scores: &[f32], target_bits: u32) -> Result<(Vec<u32>, bool)> {
    if !(3..=7).contains(&target_bits) {
        return Err(Error::InvalidArgument(format!("target bits {target_bits} outside [3, 7]")));
    }
    let n = scores.len();
    if n == 0 {
        return Err(Error::Empty("layer scores"));
    }
    if n < 3 {
        return Ok((vec![target_bits; n], true));
    }
    let band = n / 3;
    let order = argsort_desc(scores);
    let mut bits = vec![target_bits; n];
    for &l in &order[..band] {
        bits[l] = target_bits + 1;
    }
    for &l in &order[n - band..] {
        bits[l] = target_bits - 1;
    }
    Ok((bits, false))
}
