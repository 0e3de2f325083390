//! Fine-grained weight-relevance maps.
//!
//! Each criterion produces one tensor per rankable layer, shaped like the
//! layer's weight matrix (HSIC: one score per output neuron). Gradients are
//! taken of a per-sample scalar: by default the cross-entropy against the
//! calibration labels, alternatively the logit of the class the clean
//! network predicts for the sample. Labels and classes stay fixed while
//! weights move along integration paths or under noise.

mod engine;
mod gradient;
mod hsic;
mod path;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::modelzoo::{Split, TrainedModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use gradient::{crit_grad, crit_gradcampp, crit_smoothgrad, crit_vargrad, crit_weight_times_grad, crit_weights, noise_moments};
pub use hsic::{crit_hsic, hsic_group_scores, median_bandwidth, MIN_MASKS};
pub use path::{crit_gig, crit_ig, crit_idgi, gig_trace, idgi_layers, GigTrace};

/// GradCAM++ denominator regularizer.
pub const GRADCAM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Criterion {
    Weights,
    Grad,
    WeightTimesGrad,
    GradCamPlusPlus,
    IntegratedGradients,
    GuidedIntegratedGradients,
    Idgi,
    SmoothGrad,
    VarGrad,
    Hsic,
}

impl Criterion {
    pub const ALL: [Criterion; 10] = [
        Criterion::Weights,
        Criterion::Grad,
        Criterion::WeightTimesGrad,
        Criterion::GradCamPlusPlus,
        Criterion::IntegratedGradients,
        Criterion::GuidedIntegratedGradients,
        Criterion::Idgi,
        Criterion::SmoothGrad,
        Criterion::VarGrad,
        Criterion::Hsic,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Criterion::Weights => "w",
            Criterion::Grad => "grad",
            Criterion::WeightTimesGrad => "w_x_grad",
            Criterion::GradCamPlusPlus => "gradcampp",
            Criterion::IntegratedGradients => "ig",
            Criterion::GuidedIntegratedGradients => "gig",
            Criterion::Idgi => "idgi",
            Criterion::SmoothGrad => "smoothgrad",
            Criterion::VarGrad => "vargrad",
            Criterion::Hsic => "hsic",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match Criterion::ALL.into_iter().find(|c| c.id() == s) {
            Some(c) => Ok(c),
            None => bail_arg!("unknown criterion {s:?}"),
        }
    }
}

impl TryFrom<String> for Criterion {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Criterion> for String {
    fn from(c: Criterion) -> String {
        String::from(c.id())
    }
}

/// Scalar whose gradient the criteria use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// Logit of the clean prediction of each sample.
    ArgmaxLogit,
    /// Cross-entropy against the calibration labels.
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriterionConfig {
    pub target: GradTarget,
    pub ig_steps: usize,
    pub idgi_steps: usize,
    pub gig_steps: usize,
    pub gig_shrink: f32,
    pub n_noise: usize,
    /// Noise std relative to each layer's weight range.
    pub sigma_rel: f32,
    pub hsic_masks: usize,
    pub seed: u64,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        Self {
            target: GradTarget::Loss,
            ig_steps: 32,
            idgi_steps: 32,
            gig_steps: 8,
            gig_shrink: 0.1,
            n_noise: 16,
            sigma_rel: 0.1,
            hsic_masks: 256,
            seed: 0,
        }
    }
}

/// Relevance tensors of one criterion for every rankable layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionMap {
    pub model_id: String,
    pub criterion: Criterion,
    pub layers: Vec<Tensor>,
    pub calibration_size: usize,
    pub config: CriterionConfig,
}

/// Computes one criterion on `calib`.
pub fn compute(
    criterion: Criterion,
    model_id: &str,
    model: &TrainedModel,
    calib: &Split,
    config: &CriterionConfig,
) -> Result<CriterionMap> {
    let layers = match criterion {
        Criterion::Weights => crit_weights(model),
        Criterion::Grad => crit_grad(model, calib, config)?,
        Criterion::WeightTimesGrad => crit_weight_times_grad(model, calib, config)?,
        Criterion::GradCamPlusPlus => crit_gradcampp(model, calib, config)?,
        Criterion::IntegratedGradients => crit_ig(model, calib, config)?,
        Criterion::GuidedIntegratedGradients => crit_gig(model, calib, config)?,
        Criterion::Idgi => crit_idgi(model, calib, config)?,
        Criterion::SmoothGrad => crit_smoothgrad(model, calib, config)?,
        Criterion::VarGrad => crit_vargrad(model, calib, config)?,
        Criterion::Hsic => crit_hsic(model, calib, config)?,
    };
    if let Some(l) = layers.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite { node: l, op: criterion.id() });
    }
    Ok(CriterionMap {
        model_id: model_id.into(),
        criterion,
        layers,
        calibration_size: calib.len(),
        config: *config,
    })
}
