use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::criteria::CriterionMap;
use crate::modelzoo::TrainedModel;
use crate::reduce::{reduce_values, ReduceMethod};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Remove whole output neurons (weight rows and their bias entries).
    Structured,
    /// Zero individual weights.
    Unstructured,
}

/// Layers a mode may touch. Structured pruning leaves the classifier head
/// alone: removing a row there would delete a class.
pub fn prunable_layers(model: &TrainedModel, mode: PruneMode) -> Vec<bool> {
    let last = model.num_layers().saturating_sub(1);
    (0..model.num_layers()).map(|l| mode == PruneMode::Unstructured || l != last).collect()
}

/// One score per output neuron: the reduction of the neuron's row of the
/// criterion map, or the map itself when it already holds one value per
/// neuron.
pub fn neuron_scores(map: &Tensor, rows: usize, method: ReduceMethod) -> Result<Vec<f32>> {
    if map.numel() == rows && map.shape().len() == 1 {
        return Ok(map.data().iter().map(|v| v.abs()).collect());
    }
    if map.shape().len() != 2 || map.rows() != rows {
        return Err(Error::Shape(format!("criterion map {:?} for a layer of {rows} neurons", map.shape())));
    }
    (0..rows).map(|r| reduce_values(map.row(r), method)).collect()
}

fn lowest(scores: &[f32], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Applies per-layer rates without fine-tuning and returns the pruned copy.
///
/// Structured mode removes the `floor(rate * rows)` neurons with the lowest
/// intra-layer scores by zeroing their weight rows and bias entries; with
/// activations that map 0 to 0 this is equivalent to deleting the neurons
/// and the matching input columns downstream. Unstructured mode zeroes the
/// `floor(rate * numel)` weights with the lowest absolute criterion value.
pub fn prune(
    model: &TrainedModel,
    rates: &[f64],
    intra: &CriterionMap,
    mode: PruneMode,
    reduction: ReduceMethod,
) -> Result<TrainedModel> {
    if rates.len() != model.num_layers() || intra.layers.len() != model.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} rates and {} maps for {} layers",
            rates.len(),
            intra.layers.len(),
            model.num_layers()
        )));
    }
    let allowed = prunable_layers(model, mode);
    let mut out = model.clone();
    for (l, h) in model.layers.iter().enumerate() {
        let rate = rates[l];
        if rate == 0.0 {
            continue;
        }
        if !allowed[l] {
            return Err(Error::InvalidArgument(format!("layer {} cannot be pruned in {mode:?} mode", h.name)));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("rate {rate} for layer {}", h.name)));
        }
        let (rows, cols) = {
            let w = out.graph.param(h.weight);
            (w.rows(), w.cols())
        };
        match mode {
            PruneMode::Structured => {
                let count = libm::floor(rate * rows as f64) as usize;
                if count >= rows {
                    return Err(Error::Infeasible(format!("pruning would remove every neuron of {}", h.name)));
                }
                let scores = neuron_scores(&intra.layers[l], rows, reduction)?;
                let bias = h.params.iter().copied().find(|&p| {
                    let name = out.graph.param_name(p);
                    name.ends_with(".bias") && out.graph.param(p).numel() == rows
                });
                for r in lowest(&scores, count) {
                    out.graph.param_mut(h.weight).data_mut()[r * cols..(r + 1) * cols].fill(0.0);
                    if let Some(b) = bias {
                        out.graph.param_mut(b).data_mut()[r] = 0.0;
                    }
                }
            }
            PruneMode::Unstructured => {
                let n = rows * cols;
                let count = libm::floor(rate * n as f64) as usize;
                let map = &intra.layers[l];
                let scores: Vec<f32> = if map.numel() == n {
                    map.data().iter().map(|v| v.abs()).collect()
                } else if map.numel() == rows {
                    (0..n).map(|i| map.data()[i / cols].abs()).collect()
                } else {
                    return Err(Error::Shape(format!("criterion map {:?} for weight [{rows}, {cols}]", map.shape())));
                };
                let w = out.graph.param_mut(h.weight).data_mut();
                for i in lowest(&scores, count) {
                    w[i] = 0.0;
                }
            }
        }
    }
    Ok(out)
}
