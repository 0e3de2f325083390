//! Controlled per-layer perturbations and the ground-truth layer rankings
//! they induce.
//!
//! A perturbation hits either the weight matrix of one rankable layer or the
//! activation produced at its site. Importance of a layer is the mean
//! accuracy drop over a grid of noise levels and Monte-Carlo draws; the mean
//! L2 distance between perturbed and clean logits is recorded alongside.

mod noise;
mod probe;
mod truth;

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::Result;

pub use noise::{apply_noise, noise_scale};
pub(crate) use probe::count_correct;
pub use probe::{apply_perturbation, mean_logit_distance, measure_importance, Importance, PerturbedModel, Probe};
pub use truth::{audit_diversity, ground_truth, tie_groups, BucketDiversity, DiversityReport, GroundTruthRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Pepper,
    Gaussian,
    Dirac,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Pepper, NoiseKind::Gaussian, NoiseKind::Dirac];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Pepper => "pepper",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Dirac => "dirac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    Weights,
    Activations,
}

impl PerturbTarget {
    pub const ALL: [PerturbTarget; 2] = [PerturbTarget::Weights, PerturbTarget::Activations];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbTarget::Weights => "weights",
            PerturbTarget::Activations => "activations",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// One noise level applied to one layer, repeated over `n_draws` seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: NoiseKind,
    pub target: PerturbTarget,
    /// Fraction of elements hit (pepper, dirac).
    pub proportion: f32,
    /// Noise scale relative to `max |w_l|` (gaussian std, dirac magnitude).
    pub sigma_fraction: f32,
    pub n_draws: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32| v > 0.0 && v <= 1.0;
        match self.kind {
            NoiseKind::Pepper if !unit(self.proportion) => bail_arg!("pepper proportion {} outside (0, 1]", self.proportion),
            NoiseKind::Gaussian if !(self.sigma_fraction >= 0.0 && self.sigma_fraction <= 1.0) => {
                bail_arg!("gaussian sigma_fraction {} outside [0, 1]", self.sigma_fraction)
            }
            NoiseKind::Dirac if !unit(self.proportion) || !(self.sigma_fraction >= 0.0 && self.sigma_fraction <= 1.0) => {
                bail_arg!("dirac needs proportion in (0, 1] and sigma_fraction in [0, 1]")
            }
            _ => {}
        }
        if self.n_draws == 0 {
            bail_arg!("n_draws must be positive");
        }
        Ok(())
    }
}

/// Noise-level grids and Monte-Carlo settings for ground-truth measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub proportions: Vec<f32>,
    pub sigma_fractions: Vec<f32>,
    /// Fixed hit proportion paired with every dirac magnitude.
    pub dirac_proportion: f32,
    pub n_draws: usize,
    /// Layers whose mean drops differ by less than this share a tie group.
    pub tie_epsilon: f32,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            proportions: vec![0.05, 0.1, 0.2, 0.4, 0.8],
            sigma_fractions: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            dirac_proportion: 0.05,
            n_draws: 32,
            tie_epsilon: 0.002,
        }
    }
}

impl Grids {
    /// `(proportion, sigma_fraction)` for every level of `kind`.
    pub fn levels(&self, kind: NoiseKind) -> Vec<(f32, f32)> {
        match kind {
            NoiseKind::Pepper => self.proportions.iter().map(|&p| (p, 0.0)).collect(),
            NoiseKind::Gaussian => self.sigma_fractions.iter().map(|&s| (0.0, s)).collect(),
            NoiseKind::Dirac => self.sigma_fractions.iter().map(|&s| (self.dirac_proportion, s)).collect(),
        }
    }
}
