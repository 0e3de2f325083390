use alloc::vec::Vec;

use super::GradTarget;
use crate::autograd::{argmax, Graph, NodeId, OutputSelector, Reduction, Target};
use crate::modelzoo::{LayerHandle, Split, TrainedModel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A private copy of a model evaluated on the calibration set, with the
/// per-sample scalar fixed from the clean forward pass.
pub(crate) struct Engine<'a> {
    pub graph: Graph,
    pub layers: &'a [LayerHandle],
    inputs: &'a Tensor,
    selector: OutputSelector,
    pub n: usize,
    pub clean_logits: Tensor,
    dirty: Option<NodeId>,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a TrainedModel, calib: &'a Split, target: GradTarget) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        let mut graph = model.graph.detached();
        let clean_logits = graph.forward(&calib.inputs)?.clone();
        let target = match target {
            GradTarget::ArgmaxLogit => Target::Classes((0..clean_logits.rows()).map(|r| argmax(clean_logits.row(r))).collect()),
            GradTarget::Loss => Target::CrossEntropy(calib.labels.clone()),
        };
        Ok(Self {
            graph,
            layers: &model.layers,
            inputs: &calib.inputs,
            selector: OutputSelector { target, reduction: Reduction::Sum },
            n: calib.len(),
            clean_logits,
            dirty: None,
        })
    }

    pub fn weight(&self, l: usize) -> &Tensor {
        self.graph.param(self.layers[l].weight)
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut Tensor {
        self.graph.param_mut(self.layers[l].weight)
    }

    /// Recomputes the network from layer `l`'s matmul after its weight
    /// changed. Cached values before that node are made clean first if an
    /// earlier call left them stale.
    pub fn eval_layer(&mut self, l: usize) -> Result<&Tensor> {
        let start = self.layers[l].matmul;
        if let Some(d) = self.dirty.filter(|&d| d < start) {
            self.graph.rerun_from(d, &mut |_, _| {})?;
        }
        self.dirty = Some(self.dirty.map_or(start, |d| d.min(start)));
        self.graph.rerun_from(start, &mut |_, _| {})
    }

    /// Full forward pass (used when several layers changed at once).
    pub fn eval_all(&mut self) -> Result<&Tensor> {
        self.dirty = Some(NodeId(0));
        self.graph.forward(self.inputs)
    }

    /// Backward of the summed per-sample scalars.
    pub fn backward(&mut self) -> Result<()> {
        self.graph.backward(&self.selector).map(|_| ())
    }

    /// Backward far enough to get layer `l`'s weight gradient.
    pub fn backward_layer(&mut self, l: usize) -> Result<()> {
        self.graph.backward_to(&self.selector, self.layers[l].matmul).map(|_| ())
    }

    /// Batch-mean gradient of layer `l`'s weight.
    pub fn mean_grad(&self, l: usize) -> Tensor {
        let inv = 1.0 / self.n as f32;
        self.graph.grad(self.layers[l].weight).map(|g| g * inv)
    }

    pub fn sample_grad(&self, l: usize, s: usize, out: &mut [f32]) -> Result<()> {
        self.graph.sample_weight_grad(self.layers[l].weight, s, out)
    }

    /// Per-sample scalar values of the current forward pass.
    pub fn scalars(&self) -> Result<Vec<f64>> {
        let out = self.graph.output_value()?;
        Ok(match &self.selector.target {
            Target::Classes(cls) => (0..out.rows()).map(|r| out.row(r)[cls[r]] as f64).collect(),
            Target::CrossEntropy(labels) => (0..out.rows())
                .map(|r| {
                    let row = out.row(r);
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                    let lse = m + libm::log(row.iter().map(|&v| libm::exp(v as f64 - m)).sum::<f64>());
                    lse - row[labels[r]] as f64
                })
                .collect(),
            _ => unreachable!("engine selectors are classes or cross-entropy"),
        })
    }
}
