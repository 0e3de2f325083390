//! The four benchmark architecture families, the two-moons task and the
//! training protocol.

mod build;
mod moons;
mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId};
use crate::error::bail_arg;
use crate::tensor::Tensor;
use crate::Result;

pub use build::build;
pub use moons::{generate_moons, MoonsDataset, Split, SplitSizes, CALIBRATION_SIZE};
pub use train::{accuracy, predict, train, TrainConfig};

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 6;
pub const MIN_WIDTH: usize = 8;
pub const MAX_WIDTH: usize = 128;
pub const SURVIVAL_PROB: f32 = 0.8;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Vanilla,
    Skip,
    SkipSd,
    Transfo,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Vanilla, Family::Skip, Family::SkipSd, Family::Transfo];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Vanilla => "vanilla",
            Family::Skip => "skip",
            Family::SkipSd => "skip_sd",
            Family::Transfo => "transfo",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl core::fmt::Display for Family {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Architecture and seed of one benchmark network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Number of hidden layers (vanilla) or blocks (other families).
    pub depth: usize,
    /// One width per layer or block. Transformers repeat the model dimension.
    pub widths: Vec<usize>,
    /// Transformer model dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_dim: Option<usize>,
    /// Drives weight initialization and the training batch order.
    pub seed: u64,
    /// Residual-branch survival probability (stochastic depth only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_prob: Option<f32>,
    pub activation: Activation,
    /// Learned positional embeddings (transformers). Disabling them makes the
    /// network invariant to swapping the two input coordinates.
    #[serde(default = "yes")]
    pub positional: bool,
}

fn yes() -> bool {
    true
}

impl ModelSpec {
    pub fn new(family: Family, widths: Vec<usize>, seed: u64) -> Self {
        let depth = widths.len();
        let model_dim = (family == Family::Transfo).then(|| widths.first().copied().unwrap_or(0));
        let widths = match model_dim {
            Some(d) => vec![d; depth],
            None => widths,
        };
        Self {
            family,
            depth,
            widths,
            model_dim,
            seed,
            survival_prob: (family == Family::SkipSd).then_some(SURVIVAL_PROB),
            activation: if family == Family::Transfo { Activation::Gelu } else { Activation::Relu },
            positional: true,
        }
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&self.depth) {
            bail_arg!("depth {} outside [{MIN_DEPTH}, {MAX_DEPTH}]", self.depth);
        }
        if self.widths.len() != self.depth {
            bail_arg!("{} widths for depth {}", self.widths.len(), self.depth);
        }
        if let Some(w) = self.widths.iter().find(|w| !(MIN_WIDTH..=MAX_WIDTH).contains(*w)) {
            bail_arg!("width {w} outside [{MIN_WIDTH}, {MAX_WIDTH}]");
        }
        match (self.family, self.model_dim) {
            (Family::Transfo, Some(d)) if self.widths.iter().all(|&w| w == d) => {}
            (Family::Transfo, _) => bail_arg!("transformer spec needs a model dimension matching its widths"),
            (_, Some(_)) => bail_arg!("only transformers carry a model dimension"),
            _ => {}
        }
        match (self.family, self.survival_prob) {
            (Family::SkipSd, Some(p)) if p > 0.0 && p <= 1.0 => {}
            (Family::SkipSd, _) => bail_arg!("stochastic depth needs a survival probability in (0, 1]"),
            (_, Some(_)) => bail_arg!("survival probability is only meaningful for skip_sd"),
            _ => {}
        }
        Ok(())
    }
}

/// Samples depth and widths uniformly from the benchmark ranges.
pub fn sample_spec(family: Family, rng: &mut impl rand::RngCore) -> ModelSpec {
    let depth = rng.gen_range(MIN_DEPTH..=MAX_DEPTH);
    let widths: Vec<usize> = match family {
        Family::Transfo => vec![rng.gen_range(MIN_WIDTH..=MAX_WIDTH); depth],
        _ => (0..depth).map(|_| rng.gen_range(MIN_WIDTH..=MAX_WIDTH)).collect(),
    };
    let seed = rng.gen::<u64>();
    ModelSpec::new(family, widths, seed)
}

/// One rankable layer: a parameterized linear operator, the parameters that
/// belong to it and the node whose output is its activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHandle {
    pub name: String,
    pub weight: ParamId,
    /// Every parameter owned by the layer, weight first.
    pub params: Vec<ParamId>,
    pub matmul: NodeId,
    pub site: NodeId,
    /// Enclosing block for block-structured families.
    pub block: Option<usize>,
}

/// A built (possibly untrained) network.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub layers: Vec<LayerHandle>,
    gates: Vec<usize>,
}

impl Network {
    /// Sets stochastic-depth gates to their evaluation value.
    pub fn set_eval(&mut self) {
        let p = self.spec.survival_prob.unwrap_or(1.0);
        for &g in &self.gates {
            self.graph.set_gate(g, p);
        }
    }

    pub fn gate_ids(&self) -> &[usize] {
        &self.gates
    }

    /// Weight tensor shapes in layer order.
    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| self.graph.param(l.weight).shape().to_vec()).collect()
    }
}

/// A trained benchmark network with its recorded accuracies.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub graph: Graph,
    pub layers: Vec<LayerHandle>,
    pub train_accuracy: f32,
    pub test_accuracy: f32,
}

impl TrainedModel {
    /// Rebuilds the architecture of `spec` and installs `weights` by
    /// parameter name (used when loading from disk).
    pub fn from_weights(
        spec: ModelSpec,
        weights: &[(String, Tensor)],
        train_accuracy: f32,
        test_accuracy: f32,
    ) -> Result<Self> {
        let mut net = build(&spec)?;
        if weights.len() != net.graph.num_params() {
            bail_arg!("{} weight tensors for {} parameters", weights.len(), net.graph.num_params());
        }
        for (name, t) in weights {
            let Some(p) = net.graph.find_param(name) else { bail_arg!("unknown parameter {name}") };
            if net.graph.param(p).shape() != t.shape() {
                bail_arg!("parameter {name}: shape {:?} expected {:?}", t.shape(), net.graph.param(p).shape());
            }
            *net.graph.param_mut(p) = t.clone();
        }
        net.set_eval();
        Ok(Self { spec, graph: net.graph, layers: net.layers, train_accuracy, test_accuracy })
    }

    /// Wraps an arbitrary graph (used for hand-built fixtures).
    pub fn from_graph(spec: ModelSpec, graph: Graph, layers: Vec<LayerHandle>) -> Self {
        Self { spec, graph, layers, train_accuracy: 0.0, test_accuracy: 0.0 }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> Result<&LayerHandle> {
        self.layers.get(l).ok_or(crate::Error::InvalidLayer(l))
    }

    /// Number of weights per rankable layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| self.graph.param(l.weight).numel()).collect()
    }

    /// `(name, tensor)` for every parameter, in creation order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.graph
            .param_ids()
            .map(|p| (String::from(self.graph.param_name(p)), self.graph.param(p).clone()))
            .collect()
    }

    /// Logits for a batch of points.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = self.graph.detached();
        Ok(g.forward(inputs)?.clone())
    }
}
