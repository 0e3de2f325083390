use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::NoiseKind;
use crate::rng::Rng;

/// Number of elements hit when a proportion `p` of `n` is perturbed.
pub(crate) fn subset_size(p: f32, n: usize) -> usize {
    let k = libm::floorf(p * n as f32) as usize;
    k.clamp(1, n.max(1)).min(n)
}

/// Absolute noise scale: `sigma_fraction * max |w_l|`.
pub fn noise_scale(sigma_fraction: f32, weights: &[f32]) -> f32 {
    sigma_fraction * weights.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

/// Perturbs `values` in place.
///
/// * pepper zeroes exactly `max(1, floor(p N))` elements drawn without
///   replacement;
/// * gaussian adds i.i.d. `N(0, scale)` to every element;
/// * dirac adds `+-scale` (random sign per element) to `max(1, floor(p N))`
///   elements drawn without replacement.
pub fn apply_noise(kind: NoiseKind, values: &mut [f32], proportion: f32, scale: f32, rng: &mut Rng) {
    let n = values.len();
    if n == 0 {
        return;
    }
    match kind {
        NoiseKind::Pepper => {
            for i in sample(rng, n, subset_size(proportion, n)) {
                values[i] = 0.0;
            }
        }
        NoiseKind::Gaussian => {
            for v in values.iter_mut() {
                let z: f32 = StandardNormal.sample(rng);
                *v += scale * z;
            }
        }
        NoiseKind::Dirac => {
            for i in sample(rng, n, subset_size(proportion, n)) {
                values[i] += if rng.gen::<bool>() { scale } else { -scale };
            }
        }
    }
}
