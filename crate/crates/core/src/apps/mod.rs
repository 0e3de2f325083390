//! Layer rankings turned into budgets: per-layer pruning rates,
//! mixed-precision bit-widths, and the choice of layers to verify under
//! random bit flips.

mod budget;
mod faults;
mod prune;
mod quant;

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

pub use budget::{allocate_rates, pruning_budget, quantization_budget, PruneRates, MAX_RATE};
pub use faults::{flip_bit, inject_and_check, robustness_curve, CurvePoint, FaultCampaign, FaultTarget};
pub use prune::{neuron_scores, prune, prunable_layers, PruneMode};
pub use quant::{quantize, quantize_tensor, QuantizedModel};

/// Per-layer decisions derived from a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub model_id: String,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Plan {
    Prune { rates: Vec<f64>, clamped: Vec<bool> },
    Quantize { weight_bits: Vec<u32>, activation_bits: u32 },
    Check { checked: Vec<bool> },
}
