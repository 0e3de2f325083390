use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::rng::{rng_from, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CALIBRATION_SIZE: usize = 256;

/// Labelled points, inputs as a `[n, 2]` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` points.
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            inputs: Tensor::matrix(n, 2, self.inputs.data()[..2 * n].to_vec()).expect("prefix of a [n, 2] matrix"),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Fraction of points in the most frequent class.
    pub fn majority_rate(&self) -> f32 {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        ones.max(self.len() - ones) as f32 / self.len().max(1) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 1024, test: 1024 }
    }
}

/// Train, test and calibration splits drawn from one shuffled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoonsDataset {
    pub train: Split,
    pub test: Split,
    /// Always [`CALIBRATION_SIZE`] points.
    pub calibration: Split,
    pub noise_std: f32,
    pub seed: u64,
}

/// Two interleaving half circles: class 0 on the upper unit arc centred at
/// the origin, class 1 on the lower arc `(1 - cos t, 0.5 - sin t)`. Angles
/// are evenly spaced over `[0, pi]` per class, points are shuffled and then
/// jittered with isotropic Gaussian noise.
pub fn generate_moons(n_points: usize, noise_std: f32, seed: u64) -> Result<Split> {
    if n_points < 2 {
        bail_arg!("need at least 2 points, got {n_points}");
    }
    if !(noise_std >= 0.0) {
        bail_arg!("noise_std must be non-negative, got {noise_std}");
    }
    let n0 = n_points / 2;
    let n1 = n_points - n0;
    let angle = |i: usize, n: usize| {
        if n == 1 {
            0.0f64
        } else {
            core::f64::consts::PI * i as f64 / (n - 1) as f64
        }
    };
    let mut pts: Vec<([f32; 2], usize)> = Vec::with_capacity(n_points);
    for i in 0..n0 {
        let t = angle(i, n0);
        pts.push(([libm::cos(t) as f32, libm::sin(t) as f32], 0));
    }
    for i in 0..n1 {
        let t = angle(i, n1);
        pts.push(([(1.0 - libm::cos(t)) as f32, (0.5 - libm::sin(t)) as f32], 1));
    }
    let mut rng = rng_from(seed, &[tag("moons")]);
    pts.shuffle(&mut rng);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0f32, noise_std).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
        for (p, _) in pts.iter_mut() {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    let inputs = Tensor::matrix(n_points, 2, pts.iter().flat_map(|(p, _)| *p).collect())?;
    Ok(Split { inputs, labels: pts.iter().map(|&(_, l)| l).collect() })
}

impl MoonsDataset {
    pub fn generate(sizes: SplitSizes, noise_std: f32, seed: u64) -> Result<Self> {
        if sizes.train == 0 || sizes.test == 0 {
            bail_arg!("train and test splits must be non-empty");
        }
        let total = sizes.train + sizes.test + CALIBRATION_SIZE;
        let all = generate_moons(total, noise_std, seed)?;
        let take = |from: usize, n: usize| Split {
            inputs: Tensor::matrix(n, 2, all.inputs.data()[2 * from..2 * (from + n)].to_vec()).expect("slice of [n, 2]"),
            labels: all.labels[from..from + n].to_vec(),
        };
        Ok(Self {
            train: take(0, sizes.train),
            test: take(sizes.train, sizes.test),
            calibration: take(sizes.train + sizes.test, CALIBRATION_SIZE),
            noise_std,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_arc_starts_at_unit_x() {
        let s = generate_moons(10, 0.0, 3).unwrap();
        let found = (0..10).any(|i| s.labels[i] == 0 && s.inputs.row(i) == [1.0, 0.0]);
        assert!(found);
        // class 1 starts at (0, 0.5)
        assert!((0..10).any(|i| s.labels[i] == 1 && s.inputs.row(i) == [0.0, 0.5]));
    }

    #[test]
    fn two_points_one_per_class() {
        let s = generate_moons(2, 0.1, 0).unwrap();
        let mut l = s.labels.clone();
        l.sort();
        assert_eq!(l, [0, 1]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = MoonsDataset::generate(SplitSizes::default(), 0.1, 42).unwrap();
        let b = MoonsDataset::generate(SplitSizes::default(), 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = MoonsDataset::generate(SplitSizes::default(), 0.1, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn calibration_split_has_fixed_size_and_classes_balance() {
        let d = MoonsDataset::generate(SplitSizes { train: 100, test: 50 }, 0.1, 1).unwrap();
        assert_eq!(d.calibration.len(), CALIBRATION_SIZE);
        assert_eq!((d.train.len(), d.test.len()), (100, 50));
        let total = generate_moons(406, 0.1, 1).unwrap();
        assert_eq!(total.labels.iter().filter(|&&l| l == 0).count(), 203);
    }

    #[test]
    fn bad_arguments_are_rejected() {
        assert!(generate_moons(1, 0.1, 0).is_err());
        assert!(generate_moons(4, -1.0, 0).is_err());
    }
}
