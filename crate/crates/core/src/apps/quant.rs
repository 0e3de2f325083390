use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, NodeId};
use crate::modelzoo::{Split, TrainedModel};
use crate::perturb::count_correct;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Symmetric uniform per-tensor quantize-dequantize with
/// `delta = max|w| / (2^(b-1) - 1)`. Returns the dequantized values and
/// `delta` (0 for an all-zero tensor).
pub fn quantize_tensor(values: &[f32], bits: u32) -> Result<(Vec<f32>, f32)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("cannot quantize to {bits} bits")));
    }
    let qmax = ((1u32 << (bits - 1)) - 1) as f32;
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok((alloc::vec![0.0; values.len()], 0.0));
    }
    let delta = max / qmax;
    let q = values.iter().map(|&w| libm::roundf(w / delta).clamp(-qmax, qmax) * delta).collect();
    Ok((q, delta))
}

/// A model with quantized weights and fake-quantized activations.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub graph: Graph,
    /// `(site, delta, qmax)` for every fake-quantized activation.
    pub activation_sites: Vec<(NodeId, f32, f32)>,
}

impl QuantizedModel {
    pub fn forward(&mut self, inputs: &Tensor) -> Result<Tensor> {
        let sites = &self.activation_sites;
        let mut hook = |node: NodeId, t: &mut Tensor| {
            if let Some(&(_, delta, qmax)) = sites.iter().find(|(n, _, _)| *n == node) {
                if delta > 0.0 {
                    for v in t.data_mut() {
                        *v = libm::roundf(*v / delta).clamp(-qmax, qmax) * delta;
                    }
                }
            }
        };
        Ok(self.graph.forward_hooked(inputs, &mut hook)?.clone())
    }

    pub fn accuracy(&mut self, split: &Split) -> Result<f32> {
        if split.is_empty() {
            return Err(Error::Empty("split"));
        }
        let out = self.forward(&split.inputs)?;
        Ok(count_correct(&out, &split.labels) as f32 / split.len() as f32)
    }
}

/// Quantizes each rankable layer's weight matrix to its bit-width (biases
/// and normalization parameters stay in floating point). When
/// `activation_bits` is set, every rankable layer's output is fake-quantized
/// with a static per-site scale taken from the largest magnitude seen on
/// `calib` with float weights.
pub fn quantize(model: &TrainedModel, weight_bits: &[u32], activation_bits: Option<u32>, calib: &Split) -> Result<QuantizedModel> {
    if weight_bits.len() != model.num_layers() {
        return Err(Error::InvalidArgument(format!("{} bit-widths for {} layers", weight_bits.len(), model.num_layers())));
    }
    let mut graph = model.graph.detached();
    graph.set_check_finite(false);
    let mut activation_sites = Vec::new();
    if let Some(bits) = activation_bits {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("cannot quantize activations to {bits} bits")));
        }
        let qmax = ((1u32 << (bits - 1)) - 1) as f32;
        let mut peaks: Vec<(NodeId, f32)> = model.layers.iter().map(|h| (h.site, 0.0f32)).collect();
        let mut hook = |node: NodeId, t: &mut Tensor| {
            for (n, peak) in peaks.iter_mut() {
                if *n == node {
                    *peak = peak.max(t.max_abs());
                }
            }
        };
        graph.forward_hooked(&calib.inputs, &mut hook)?;
        activation_sites = peaks.into_iter().map(|(n, p)| (n, p / qmax, qmax)).collect();
    }
    for (h, &bits) in model.layers.iter().zip(weight_bits) {
        let (q, _) = quantize_tensor(graph.param(h.weight).data(), bits)?;
        graph.param_mut(h.weight).data_mut().copy_from_slice(&q);
    }
    Ok(QuantizedModel { graph, activation_sites })
}
