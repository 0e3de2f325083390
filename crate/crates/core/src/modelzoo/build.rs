use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use super::{Activation, Family, LayerHandle, ModelSpec, Network, NUM_CLASSES};
use crate::autograd::{Graph, NodeId, Op, ParamId};
use crate::rng::{rng_from, tag, Rng};
use crate::tensor::Tensor;
use crate::Result;

/// Number of tokens a transformer sees: one per input coordinate.
const TOKENS: usize = 2;

struct Builder {
    g: Graph,
    rng: Rng,
    layers: Vec<LayerHandle>,
    gates: Vec<usize>,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.g.add_param(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) -> ParamId {
        self.g.add_param(name, Tensor::from_fn(shape, |_| v))
    }

    /// `x W^T + b`, registered as a rankable layer whose activation site is
    /// the affine output unless `site` is overridden later.
    fn linear(&mut self, name: &str, x: NodeId, inp: usize, out: usize, bias: bool, block: Option<usize>) -> Result<NodeId> {
        let bound = 1.0 / libm::sqrtf(inp as f32);
        let w = self.uniform(format!("{name}.weight"), &[out, inp], bound);
        let mut params = vec![w];
        let mm = self.g.push(Op::MatMul { x, w })?;
        let mut y = mm;
        if bias {
            let b = self.uniform(format!("{name}.bias"), &[out], bound);
            params.push(b);
            y = self.g.push(Op::BiasAdd { x: mm, b })?;
        }
        self.layers.push(LayerHandle { name: name.into(), weight: w, params, matmul: mm, site: y, block });
        Ok(y)
    }

    fn activation(&mut self, act: Activation, x: NodeId) -> Result<NodeId> {
        let y = match act {
            Activation::Relu => self.g.push(Op::Relu { x })?,
            Activation::Gelu => self.g.push(Op::Gelu { x })?,
        };
        self.layers.last_mut().expect("activation follows a layer").site = y;
        Ok(y)
    }

    fn layer_norm(&mut self, name: &str, x: NodeId, dim: usize) -> Result<NodeId> {
        let gamma = self.constant(format!("{name}.gamma"), &[dim], 1.0);
        let beta = self.constant(format!("{name}.beta"), &[dim], 0.0);
        self.g.push(Op::LayerNorm { x, gamma, beta })
    }

    /// Attaches parameters that are not part of any linear operator to the
    /// layer that consumes them.
    fn attach(&mut self, layer: usize, params: &[ParamId]) {
        self.layers[layer].params.extend_from_slice(params);
    }
}

/// Builds the computation graph of `spec` with freshly initialized weights.
///
/// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
/// stochastic-depth gates start at their evaluation value.
pub fn build(spec: &ModelSpec) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        g: Graph::new(2),
        rng: rng_from(spec.seed, &[tag("init")]),
        layers: Vec::new(),
        gates: Vec::new(),
    };
    match spec.family {
        Family::Vanilla => build_mlp(&mut b, spec)?,
        Family::Skip | Family::SkipSd => build_residual(&mut b, spec)?,
        Family::Transfo => build_transformer(&mut b, spec)?,
    }
    let mut net = Network { spec: spec.clone(), graph: b.g, layers: b.layers, gates: b.gates };
    net.set_eval();
    Ok(net)
}

fn build_mlp(b: &mut Builder, spec: &ModelSpec) -> Result<()> {
    let mut h = b.g.input();
    let mut dim = 2;
    for (i, &w) in spec.widths.iter().enumerate() {
        let z = b.linear(&format!("fc{i}"), h, dim, w, true, None)?;
        h = b.activation(spec.activation, z)?;
        dim = w;
    }
    b.linear("head", h, dim, NUM_CLASSES, true, None)?;
    Ok(())
}

fn build_residual(b: &mut Builder, spec: &ModelSpec) -> Result<()> {
    let mut h = b.g.input();
    let mut dim = 2;
    for (i, &w) in spec.widths.iter().enumerate() {
        let z = b.linear(&format!("block{i}.fc"), h, dim, w, true, Some(i))?;
        let mut branch = b.activation(spec.activation, z)?;
        if spec.family == Family::SkipSd {
            let gate = b.g.add_gate(1.0);
            b.gates.push(gate);
            branch = b.g.push(Op::Gate { x: branch, gate })?;
        }
        let shortcut = if dim == w { h } else { b.linear(&format!("block{i}.proj"), h, dim, w, false, Some(i))? };
        h = b.g.push(Op::Add { a: branch, b: shortcut })?;
        dim = w;
    }
    b.linear("head", h, dim, NUM_CLASSES, true, None)?;
    Ok(())
}

fn build_transformer(b: &mut Builder, spec: &ModelSpec) -> Result<()> {
    let d = spec.model_dim.expect("validated transformer spec");
    let tokens = b.g.push(Op::Tokens { x: b.g.input() })?;
    let mut h = b.linear("embed", tokens, 1, d, true, None)?;
    if spec.positional {
        let pos = b.uniform(String::from("embed.pos"), &[TOKENS, d], 1.0);
        b.attach(0, &[pos]);
        h = b.g.push(Op::AddPositional { x: h, pos, tokens: TOKENS })?;
    }
    for i in 0..spec.depth {
        let blk = Some(i);
        let ln1 = b.layer_norm(&format!("block{i}.ln1"), h, d)?;
        let q = b.linear(&format!("block{i}.wq"), ln1, d, d, true, blk)?;
        let ln1_params = b.g.op(ln1).params();
        let wq_layer = b.layers.len() - 1;
        b.attach(wq_layer, &ln1_params);
        let k = b.linear(&format!("block{i}.wk"), ln1, d, d, true, blk)?;
        let v = b.linear(&format!("block{i}.wv"), ln1, d, d, true, blk)?;
        let att = b.g.push(Op::Attention { q, k, v, tokens: TOKENS })?;
        let o = b.linear(&format!("block{i}.wo"), att, d, d, true, blk)?;
        h = b.g.push(Op::Add { a: h, b: o })?;

        let ln2 = b.layer_norm(&format!("block{i}.ln2"), h, d)?;
        let z = b.linear(&format!("block{i}.mlp1"), ln2, d, d, true, blk)?;
        let ln2_params = b.g.op(ln2).params();
        let mlp1_layer = b.layers.len() - 1;
        b.attach(mlp1_layer, &ln2_params);
        let m = b.activation(Activation::Gelu, z)?;
        let m2 = b.linear(&format!("block{i}.mlp2"), m, d, d, true, blk)?;
        h = b.g.push(Op::Add { a: h, b: m2 })?;
    }
    let pooled = b.g.push(Op::MeanPool { x: h, tokens: TOKENS })?;
    let lnf = b.layer_norm("final_ln", pooled, d)?;
    b.linear("head", lnf, d, NUM_CLASSES, true, None)?;
    let lnf_params = b.g.op(lnf).params();
    let head = b.layers.len() - 1;
    b.attach(head, &lnf_params);
    Ok(())
}
