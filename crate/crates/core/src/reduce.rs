//! Projection of fine-grained relevance maps to one sensitivity score per
//! layer, and the rankings those scores induce.
//!
//! Scores are sensitivities: larger means the layer matters more, and
//! rankings list the most sensitive layer first.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReduceMethod {
    /// Mean absolute value.
    Average,
    /// Percentile of absolute values in `[0, 100]`, linearly interpolated.
    Percentile(f32),
    L1,
    L2,
    Linf,
}

impl ReduceMethod {
    /// The five reductions with the median standing in for percentiles.
    pub const STANDARD: [ReduceMethod; 5] =
        [ReduceMethod::Average, ReduceMethod::Percentile(50.0), ReduceMethod::L1, ReduceMethod::L2, ReduceMethod::Linf];
    /// Percentiles swept when reporting the best percentile.
    pub const PERCENTILES: [f32; 4] = [50.0, 75.0, 90.0, 99.0];
}

impl fmt::Display for ReduceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReduceMethod::Average => f.write_str("average"),
            ReduceMethod::Percentile(p) => write!(f, "p{p}"),
            ReduceMethod::L1 => f.write_str("l1"),
            ReduceMethod::L2 => f.write_str("l2"),
            ReduceMethod::Linf => f.write_str("linf"),
        }
    }
}

impl FromStr for ReduceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "average" => ReduceMethod::Average,
            "l1" => ReduceMethod::L1,
            "l2" => ReduceMethod::L2,
            "linf" => ReduceMethod::Linf,
            _ => match s.strip_prefix('p').and_then(|p| p.parse::<f32>().ok()) {
                Some(p) if (0.0..=100.0).contains(&p) => ReduceMethod::Percentile(p),
                _ => bail_arg!("unknown reduction {s:?}"),
            },
        })
    }
}

impl TryFrom<String> for ReduceMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReduceMethod> for String {
    fn from(m: ReduceMethod) -> String {
        m.to_string()
    }
}

/// Per-layer sensitivities of one model under one criterion and reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub model_id: String,
    pub criterion: String,
    pub reduction: ReduceMethod,
    pub scores: Vec<f32>,
    /// Most sensitive layer first; equal scores keep layer order.
    pub ranking: Vec<usize>,
}

/// Reduces one layer's map to a scalar.
pub fn reduce_values(values: &[f32], method: ReduceMethod) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Empty("layer map"));
    }
    let n = values.len() as f64;
    let abs = values.iter().map(|v| v.abs() as f64);
    let s = match method {
        ReduceMethod::Average => abs.sum::<f64>() / n,
        ReduceMethod::L1 => abs.sum::<f64>(),
        ReduceMethod::L2 => libm::sqrt(abs.map(|a| a * a).sum::<f64>()),
        ReduceMethod::Linf => abs.fold(0.0, f64::max),
        ReduceMethod::Percentile(p) => {
            if !(0.0..=100.0).contains(&p) {
                bail_arg!("percentile {p} outside [0, 100]");
            }
            let mut sorted: Vec<f64> = abs.collect();
            sorted.sort_by(f64::total_cmp);
            let pos = p as f64 / 100.0 * (n - 1.0);
            let lo = libm::floor(pos) as usize;
            let hi = libm::ceil(pos) as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    };
    Ok(s as f32)
}

/// Reduces every layer tensor of a map.
pub fn reduce_layers(layers: &[Tensor], method: ReduceMethod) -> Result<Vec<f32>> {
    if layers.is_empty() {
        return Err(Error::Empty("criterion map"));
    }
    layers.iter().map(|t| reduce_values(t.data(), method)).collect()
}

/// Scores and ranking for a criterion map.
pub fn reduce_map(map: &crate::criteria::CriterionMap, method: ReduceMethod) -> Result<LayerScores> {
    let scores = reduce_layers(&map.layers, method)?;
    if let Some(l) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("layer {l} of {} reduces to a non-finite score", map.criterion)));
    }
    Ok(LayerScores {
        model_id: map.model_id.clone(),
        criterion: map.criterion.to_string(),
        reduction: method,
        ranking: rank_layers(&scores),
        scores,
    })
}

/// Layer indices by decreasing score, ties broken by index.
pub fn rank_layers(scores: &[f32]) -> Vec<usize> {
    argsort_desc(scores)
}

pub(crate) fn argsort_desc(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}
