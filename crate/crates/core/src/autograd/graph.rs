use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::kernels::{self, gelu, gelu_grad};
use super::loss;
use crate::tensor::{axpy, Tensor};
use crate::{Error, Result};

/// Index of a parameter tensor in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Index of an operation node in a [`Graph`]. Node 0 is always the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Supported operations. Every tensor flowing through the program is a
/// matrix whose rows are (sample, token) pairs; `tokens` gives the number of
/// consecutive rows that belong to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input,
    /// `[batch, t]` to `[batch * t, 1]`: one token per input coordinate.
    Tokens { x: NodeId },
    /// `x @ w^T` with `w` of shape `[out, in]`.
    MatMul { x: NodeId, w: ParamId },
    BiasAdd { x: NodeId, b: ParamId },
    /// Adds row `r % tokens` of `pos` to row `r`.
    AddPositional { x: NodeId, pos: ParamId, tokens: usize },
    Add { a: NodeId, b: NodeId },
    /// Multiplies by the scalar gate value `gates[gate]`.
    Gate { x: NodeId, gate: usize },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: ParamId, beta: ParamId },
    MeanPool { x: NodeId, tokens: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, tokens: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Tokens { .. } => "tokens",
            Op::MatMul { .. } => "matmul",
            Op::BiasAdd { .. } => "bias_add",
            Op::AddPositional { .. } => "add_positional",
            Op::Add { .. } => "add",
            Op::Gate { .. } => "gate",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool { .. } => "mean_pool",
            Op::Attention { .. } => "attention",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input => vec![],
            Op::Tokens { x }
            | Op::MatMul { x, .. }
            | Op::BiasAdd { x, .. }
            | Op::AddPositional { x, .. }
            | Op::Gate { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Softmax { x }
            | Op::LayerNorm { x, .. }
            | Op::MeanPool { x, .. } => vec![x],
            Op::Add { a, b } => vec![a, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match *self {
            Op::MatMul { w, .. } => vec![w],
            Op::BiasAdd { b, .. } => vec![b],
            Op::AddPositional { pos, .. } => vec![pos],
            Op::LayerNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }
}

/// What scalar the backward pass differentiates.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Logit of each sample's own arg-max class.
    ArgmaxLogit,
    /// Logit of a fixed class per sample.
    Classes(Vec<usize>),
    /// Cross-entropy against integer labels.
    CrossEntropy(Vec<usize>),
    /// Squared error against a target matrix of the output's shape.
    Mse(Tensor),
    /// `sum(seed * output)` for an arbitrary seed of the output's shape.
    Seed(Tensor),
}

/// How per-sample scalars combine into the differentiated scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSelector {
    pub target: Target,
    pub reduction: Reduction,
}

impl OutputSelector {
    /// Batch mean of the arg-max logit (the default attribution scalar).
    pub fn argmax() -> Self {
        Self { target: Target::ArgmaxLogit, reduction: Reduction::Mean }
    }

    pub fn classes(classes: Vec<usize>, reduction: Reduction) -> Self {
        Self { target: Target::Classes(classes), reduction }
    }

    pub fn cross_entropy(labels: Vec<usize>) -> Self {
        Self { target: Target::CrossEntropy(labels), reduction: Reduction::Mean }
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
}

/// A program of tensor operations with its parameters and cached
/// intermediates.
///
/// A graph is single-writer: forward and backward mutate the caches, so a
/// graph must not be evaluated from two threads at once. Cloning yields an
/// independent instance.
#[derive(Debug, Clone)]
pub struct Graph {
    params: Vec<Param>,
    ops: Vec<Op>,
    input_cols: usize,
    gates: Vec<f32>,
    output: Option<NodeId>,
    check_finite: bool,
    weight_users: Vec<Option<NodeId>>,

    values: Vec<Tensor>,
    aux: Vec<Tensor>,
    node_grads: Vec<Tensor>,
    param_grads: Vec<Tensor>,
    batch: usize,
    forwarded: bool,
    backwarded: bool,
}

impl Graph {
    /// A graph whose input is a `[batch, input_cols]` matrix.
    pub fn new(input_cols: usize) -> Self {
        Self {
            params: Vec::new(),
            ops: vec![Op::Input],
            input_cols,
            gates: Vec::new(),
            output: None,
            check_finite: true,
            weight_users: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            node_grads: Vec::new(),
            param_grads: Vec::new(),
            batch: 0,
            forwarded: false,
            backwarded: false,
        }
    }

    pub fn input(&self) -> NodeId {
        NodeId(0)
    }

    pub fn input_cols(&self) -> usize {
        self.input_cols
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        self.weight_users.push(None);
        ParamId(self.params.len() - 1)
    }

    pub fn add_gate(&mut self, value: f32) -> usize {
        self.gates.push(value);
        self.gates.len() - 1
    }

    /// Appends an operation. Inputs must already exist and every parameter
    /// may feed at most one matrix product.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.ops.len();
        if matches!(op, Op::Input) {
            bail_shape(format!("node {id}: only node 0 may be an input"))?;
        }
        for x in op.inputs() {
            if x.0 >= id {
                bail_shape(format!("node {id} reads node {} which does not precede it", x.0))?;
            }
        }
        for p in op.params() {
            if p.0 >= self.params.len() {
                return Err(Error::InvalidArgument(format!("unknown parameter {}", p.0)));
            }
        }
        match op {
            Op::MatMul { w, .. } => {
                if self.params[w.0].value.shape().len() != 2 {
                    bail_shape(format!("matmul weight {} must be 2-D", self.params[w.0].name))?;
                }
                if self.weight_users[w.0].is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {} already feeds a matmul",
                        self.params[w.0].name
                    )));
                }
                self.weight_users[w.0] = Some(NodeId(id));
            }
            Op::Gate { gate, .. } if gate >= self.gates.len() => {
                return Err(Error::InvalidArgument(format!("unknown gate {gate}")));
            }
            Op::AddPositional { tokens: 0, .. } | Op::MeanPool { tokens: 0, .. } | Op::Attention { tokens: 0, .. } => {
                return Err(Error::InvalidArgument("token count must be positive".into()));
            }
            _ => {}
        }
        self.ops.push(op);
        self.output = Some(NodeId(id));
        self.forwarded = false;
        Ok(NodeId(id))
    }

    /// Marks `node` as the program output (defaults to the last node pushed).
    pub fn set_output(&mut self, node: NodeId) -> Result<()> {
        if node.0 == 0 || node.0 >= self.ops.len() {
            return Err(Error::InvalidArgument(format!("invalid output node {}", node.0)));
        }
        self.output = Some(node);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.ops[node.0]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, p: ParamId) -> &Tensor {
        &self.params[p.0].value
    }

    /// Mutable access to a parameter. Cached activations downstream of its
    /// first use become stale until the next forward or rerun.
    pub fn param_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.params[p.0].value
    }

    /// Mutable parameter values alongside their gradients from the last
    /// backward pass, in parameter order.
    pub fn params_and_grads_mut(&mut self) -> Result<(Vec<&mut Tensor>, Vec<&Tensor>)> {
        if !self.backwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let values = self.params.iter_mut().map(|p| &mut p.value).collect();
        let grads = self.param_grads.iter().collect();
        Ok((values, grads))
    }

    pub fn param_name(&self, p: ParamId) -> &str {
        &self.params[p.0].name
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// The matmul node consuming weight `p`, if any.
    pub fn weight_user(&self, p: ParamId) -> Option<NodeId> {
        self.weight_users[p.0]
    }

    /// First node that reads parameter `p`.
    pub fn first_use(&self, p: ParamId) -> Option<NodeId> {
        self.ops.iter().position(|op| op.params().contains(&p)).map(NodeId)
    }

    pub fn gates(&self) -> &[f32] {
        &self.gates
    }

    pub fn set_gate(&mut self, gate: usize, value: f32) {
        self.gates[gate] = value;
    }

    /// Whether forward fails on NaN/Inf intermediates (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Copy of the program and parameters without cached state.
    pub fn detached(&self) -> Graph {
        Graph {
            params: self.params.clone(),
            ops: self.ops.clone(),
            input_cols: self.input_cols,
            gates: self.gates.clone(),
            output: self.output,
            check_finite: self.check_finite,
            weight_users: self.weight_users.clone(),
            values: Vec::new(),
            aux: Vec::new(),
            node_grads: Vec::new(),
            param_grads: Vec::new(),
            batch: 0,
            forwarded: false,
            backwarded: false,
        }
    }

    /// Batch size of the last forward pass.
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output_value(&self) -> Result<&Tensor> {
        let out = self.output.ok_or(Error::EmptyGraph)?;
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        Ok(&self.values[out.0])
    }

    /// Gradient of the last backward scalar with respect to a node's output.
    pub fn node_grad(&self, node: NodeId) -> &Tensor {
        &self.node_grads[node.0]
    }

    pub fn grad(&self, p: ParamId) -> &Tensor {
        &self.param_grads[p.0]
    }

    pub fn evaluate(&mut self, input: &Tensor) -> Result<&Tensor> {
        self.forward(input)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<&Tensor> {
        self.forward_hooked(input, &mut |_, _| {})
    }

    /// Forward pass calling `hook` on every node output right after it is
    /// computed. The hook may edit the value in place; downstream nodes and
    /// the backward pass see the edited value.
    pub fn forward_hooked(&mut self, input: &Tensor, hook: &mut dyn FnMut(NodeId, &mut Tensor)) -> Result<&Tensor> {
        let out = self.output.ok_or(Error::EmptyGraph)?;
        if input.shape().len() != 2 || input.cols() != self.input_cols {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match declared [batch, {}]",
                input.shape(),
                self.input_cols
            )));
        }
        let n = self.ops.len();
        self.values.resize_with(n, Tensor::default);
        self.aux.resize_with(n, Tensor::default);
        self.batch = input.rows();
        self.values[0].reset(input.shape());
        self.values[0].data_mut().copy_from_slice(input.data());
        hook(NodeId(0), &mut self.values[0]);
        self.forwarded = false;
        self.backwarded = false;
        for i in 1..=out.0 {
            self.eval_node(i)?;
            hook(NodeId(i), &mut self.values[i]);
        }
        self.forwarded = true;
        Ok(&self.values[out.0])
    }

    /// Re-evaluates nodes `start..=output` reusing cached values of earlier
    /// nodes. Valid after any forward pass on the same input whenever only
    /// parameters first read at or after `start` changed.
    pub fn rerun_from(&mut self, start: NodeId, hook: &mut dyn FnMut(NodeId, &mut Tensor)) -> Result<&Tensor> {
        let out = self.output.ok_or(Error::EmptyGraph)?;
        if !self.forwarded && start.0 > 0 {
            return Err(Error::BackwardBeforeForward);
        }
        if start.0 == 0 {
            let input = self.values[0].clone();
            return self.forward_hooked(&input, hook);
        }
        self.backwarded = false;
        for i in start.0..=out.0 {
            self.eval_node(i)?;
            hook(NodeId(i), &mut self.values[i]);
        }
        Ok(&self.values[out.0])
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let (prev, rest) = self.values.split_at_mut(i);
        let y = &mut rest[0];
        let aux = &mut self.aux[i];
        let params = &self.params;
        let op = &self.ops[i];
        match *op {
            Op::Input => unreachable!("node 0 is the only input"),
            Op::Tokens { x } => {
                let xv = &prev[x.0];
                y.reset(&[xv.numel(), 1]);
                y.data_mut().copy_from_slice(xv.data());
            }
            Op::MatMul { x, w } => {
                let xv = &prev[x.0];
                let wv = &params[w.0].value;
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                if xv.cols() != inp {
                    bail_shape(format!(
                        "matmul {}: input has {} columns, weight expects {}",
                        params[w.0].name,
                        xv.cols(),
                        inp
                    ))?;
                }
                y.reset(&[xv.rows(), out]);
                kernels::matmul_fwd(xv.data(), wv.data(), xv.rows(), inp, out, y.data_mut());
            }
            Op::BiasAdd { x, b } => {
                let xv = &prev[x.0];
                let bv = &params[b.0].value;
                if xv.cols() != bv.numel() {
                    bail_shape(format!("bias {} has {} entries for {} columns", params[b.0].name, bv.numel(), xv.cols()))?;
                }
                y.reset(&[xv.rows(), xv.cols()]);
                for r in 0..xv.rows() {
                    let yr = y.row_mut(r);
                    yr.copy_from_slice(xv.row(r));
                    axpy(1.0, bv.data(), yr);
                }
            }
            Op::AddPositional { x, pos, tokens } => {
                let xv = &prev[x.0];
                let pv = &params[pos.0].value;
                if pv.rows() != tokens || pv.cols() != xv.cols() || xv.rows() % tokens != 0 {
                    bail_shape(format!("positional table {:?} vs input {:?}", pv.shape(), xv.shape()))?;
                }
                y.reset(&[xv.rows(), xv.cols()]);
                for r in 0..xv.rows() {
                    let yr = y.row_mut(r);
                    yr.copy_from_slice(xv.row(r));
                    axpy(1.0, pv.row(r % tokens), yr);
                }
            }
            Op::Add { a, b } => {
                let (av, bv) = (&prev[a.0], &prev[b.0]);
                if !av.same_shape(bv) {
                    bail_shape(format!("add of {:?} and {:?}", av.shape(), bv.shape()))?;
                }
                y.reset(av.shape());
                for ((o, &p), &q) in y.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *o = p + q;
                }
            }
            Op::Gate { x, gate } => {
                let g = self.gates[gate];
                let xv = &prev[x.0];
                y.reset(xv.shape());
                for (o, &v) in y.data_mut().iter_mut().zip(xv.data()) {
                    *o = g * v;
                }
            }
            Op::Relu { x } => {
                let xv = &prev[x.0];
                y.reset(xv.shape());
                for (o, &v) in y.data_mut().iter_mut().zip(xv.data()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Op::Gelu { x } => {
                let xv = &prev[x.0];
                y.reset(xv.shape());
                for (o, &v) in y.data_mut().iter_mut().zip(xv.data()) {
                    *o = gelu(v);
                }
            }
            Op::Softmax { x } => {
                let xv = &prev[x.0];
                y.reset(xv.shape());
                let c = xv.cols();
                for r in 0..xv.rows() {
                    kernels::softmax_row(xv.row(r), &mut y.data_mut()[r * c..(r + 1) * c]);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &prev[x.0];
                let (g, b) = (&params[gamma.0].value, &params[beta.0].value);
                if g.numel() != xv.cols() || b.numel() != xv.cols() {
                    bail_shape(format!("layer norm over {} columns with {} gains", xv.cols(), g.numel()))?;
                }
                y.reset(xv.shape());
                aux.reset(&[xv.rows(), 2]);
                kernels::layernorm_fwd(xv.data(), g.data(), b.data(), xv.cols(), y.data_mut(), aux.data_mut());
            }
            Op::MeanPool { x, tokens } => {
                let xv = &prev[x.0];
                if xv.rows() % tokens != 0 {
                    bail_shape(format!("mean pool of {} rows in groups of {tokens}", xv.rows()))?;
                }
                let c = xv.cols();
                y.reset_zeroed(&[xv.rows() / tokens, c]);
                let inv = 1.0 / tokens as f32;
                for r in 0..xv.rows() {
                    axpy(inv, xv.row(r), &mut y.data_mut()[(r / tokens) * c..(r / tokens + 1) * c]);
                }
            }
            Op::Attention { q, k, v, tokens } => {
                let (qv, kv, vv) = (&prev[q.0], &prev[k.0], &prev[v.0]);
                if !qv.same_shape(kv) || !qv.same_shape(vv) || qv.rows() % tokens != 0 {
                    bail_shape(format!("attention over q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()))?;
                }
                y.reset(qv.shape());
                aux.reset(&[qv.rows() / tokens, tokens * tokens]);
                kernels::attention_fwd(qv.data(), kv.data(), vv.data(), qv.cols(), tokens, y.data_mut(), aux.data_mut());
            }
        }
        if self.check_finite && !y.is_finite() {
            return Err(Error::NonFinite { node: i, op: op.name() });
        }
        Ok(())
    }

    /// Differentiates the scalar picked by `selector` with respect to every
    /// node and parameter. Returns the scalar.
    pub fn backward(&mut self, selector: &OutputSelector) -> Result<f32> {
        self.backward_to(selector, NodeId(1))
    }

    /// Like [`Graph::backward`] but stops after node `stop`: gradients are
    /// exact for nodes at or after `stop` and for parameters only read
    /// there, and incomplete for everything earlier.
    pub fn backward_to(&mut self, selector: &OutputSelector, stop: NodeId) -> Result<f32> {
        let out = self.output.ok_or(Error::EmptyGraph)?;
        if !self.forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let n = self.ops.len();
        self.node_grads.resize_with(n, Tensor::default);
        for i in 0..=out.0 {
            let shape: Vec<usize> = self.values[i].shape().to_vec();
            self.node_grads[i].reset_zeroed(&shape);
        }
        self.param_grads.resize_with(self.params.len(), Tensor::default);
        for (g, p) in self.param_grads.iter_mut().zip(&self.params) {
            g.reset_zeroed(p.value.shape());
        }

        let value = seed_output(&self.values[out.0], selector, &mut self.node_grads[out.0])?;

        for i in (stop.0.max(1)..=out.0).rev() {
            self.backprop_node(i);
        }
        self.backwarded = true;
        Ok(value)
    }

    fn backprop_node(&mut self, i: usize) {
        let (gprev, grest) = self.node_grads.split_at_mut(i);
        let dy = &grest[0];
        let values = &self.values;
        let y = &values[i];
        let aux = &self.aux[i];
        let params = &self.params;
        let pgrads = &mut self.param_grads;
        match self.ops[i] {
            Op::Input => {}
            Op::Tokens { x } => axpy(1.0, dy.data(), gprev[x.0].data_mut()),
            Op::MatMul { x, w } => {
                let xv = &values[x.0];
                let wv = &params[w.0].value;
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                kernels::matmul_bwd(
                    xv.data(),
                    wv.data(),
                    dy.data(),
                    xv.rows(),
                    inp,
                    out,
                    Some(gprev[x.0].data_mut()),
                    pgrads[w.0].data_mut(),
                );
            }
            Op::BiasAdd { x, b } => {
                axpy(1.0, dy.data(), gprev[x.0].data_mut());
                let db = pgrads[b.0].data_mut();
                for r in 0..dy.rows() {
                    axpy(1.0, dy.row(r), db);
                }
            }
            Op::AddPositional { x, pos, tokens } => {
                axpy(1.0, dy.data(), gprev[x.0].data_mut());
                let c = dy.cols();
                let dp = pgrads[pos.0].data_mut();
                for r in 0..dy.rows() {
                    let t = r % tokens;
                    axpy(1.0, dy.row(r), &mut dp[t * c..(t + 1) * c]);
                }
            }
            Op::Add { a, b } => {
                axpy(1.0, dy.data(), gprev[a.0].data_mut());
                axpy(1.0, dy.data(), gprev[b.0].data_mut());
            }
            Op::Gate { x, gate } => axpy(self.gates[gate], dy.data(), gprev[x.0].data_mut()),
            Op::Relu { x } => {
                let dx = gprev[x.0].data_mut();
                for ((d, &g), &xv) in dx.iter_mut().zip(dy.data()).zip(values[x.0].data()) {
                    if xv > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Gelu { x } => {
                let dx = gprev[x.0].data_mut();
                for ((d, &g), &xv) in dx.iter_mut().zip(dy.data()).zip(values[x.0].data()) {
                    *d += g * gelu_grad(xv);
                }
            }
            Op::Softmax { x } => {
                let c = y.cols();
                let dx = gprev[x.0].data_mut();
                for r in 0..y.rows() {
                    kernels::softmax_row_bwd(y.row(r), dy.row(r), &mut dx[r * c..(r + 1) * c]);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &values[x.0];
                let mut dgamma = core::mem::take(&mut pgrads[gamma.0]);
                kernels::layernorm_bwd(
                    xv.data(),
                    params[gamma.0].value.data(),
                    aux.data(),
                    dy.data(),
                    xv.cols(),
                    gprev[x.0].data_mut(),
                    dgamma.data_mut(),
                    pgrads[beta.0].data_mut(),
                );
                pgrads[gamma.0] = dgamma;
            }
            Op::MeanPool { x, tokens } => {
                let inv = 1.0 / tokens as f32;
                let c = dy.cols();
                let dx = gprev[x.0].data_mut();
                for r in 0..dx.len() / c {
                    axpy(inv, dy.row(r / tokens), &mut dx[r * c..(r + 1) * c]);
                }
            }
            Op::Attention { q, k, v, tokens } => {
                let d = y.cols();
                let mut dq = core::mem::take(&mut gprev[q.0]);
                let mut dk = core::mem::take(&mut gprev[k.0]);
                let mut dv = core::mem::take(&mut gprev[v.0]);
                kernels::attention_bwd(
                    values[q.0].data(),
                    values[k.0].data(),
                    values[v.0].data(),
                    aux.data(),
                    dy.data(),
                    d,
                    tokens,
                    dq.data_mut(),
                    dk.data_mut(),
                    dv.data_mut(),
                );
                gprev[q.0] = dq;
                gprev[k.0] = dk;
                gprev[v.0] = dv;
            }
        }
    }

    /// Rows of every matmul that belong to one sample.
    fn rows_per_sample(&self, node: NodeId) -> usize {
        self.values[node.0].rows() / self.batch.max(1)
    }

    /// Gradient of sample `s`'s own scalar with respect to weight `w`, written
    /// into `out` (shape of `w`). Requires a backward pass with
    /// [`Reduction::Sum`]; with [`Reduction::Mean`] the result is scaled by
    /// `1 / batch`.
    pub fn sample_weight_grad(&self, w: ParamId, s: usize, out: &mut [f32]) -> Result<()> {
        if !self.backwarded {
            return Err(Error::BackwardBeforeForward);
        }
        let node = self.weight_users[w.0].ok_or_else(|| Error::InvalidArgument(format!("{} is not a matmul weight", self.params[w.0].name)))?;
        let Op::MatMul { x, .. } = self.ops[node.0] else { unreachable!() };
        let wv = &self.params[w.0].value;
        let (o_dim, i_dim) = (wv.shape()[0], wv.shape()[1]);
        if out.len() != o_dim * i_dim {
            bail_shape(format!("per-sample buffer of {} for weight {:?}", out.len(), wv.shape()))?;
        }
        if s >= self.batch {
            return Err(Error::InvalidArgument(format!("sample {s} out of batch {}", self.batch)));
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let rps = self.rows_per_sample(node);
        let xv = &self.values[x.0];
        let dy = &self.node_grads[node.0];
        for r in s * rps..(s + 1) * rps {
            let xr = xv.row(r);
            let dyr = dy.row(r);
            for o in 0..o_dim {
                if dyr[o] != 0.0 {
                    axpy(dyr[o], xr, &mut out[o * i_dim..(o + 1) * i_dim]);
                }
            }
        }
        Ok(())
    }

    /// Per-sample output values of node `node` for sample `s` (all its rows).
    pub fn sample_rows(&self, node: NodeId, s: usize) -> &[f32] {
        let v = &self.values[node.0];
        let rps = v.rows() / self.batch.max(1);
        &v.data()[s * rps * v.cols()..(s + 1) * rps * v.cols()]
    }
}

fn bail_shape(msg: String) -> Result<()> {
    Err(Error::Shape(msg))
}

/// Writes d(scalar)/d(output) into `grad` and returns the scalar.
fn seed_output(out: &Tensor, selector: &OutputSelector, grad: &mut Tensor) -> Result<f32> {
    let rows = out.rows();
    let cols = out.cols();
    let scale = match selector.reduction {
        Reduction::Mean => 1.0 / rows.max(1) as f32,
        Reduction::Sum => 1.0,
    };
    let check_len = |n: usize| -> Result<()> {
        if n != rows {
            return Err(Error::Shape(format!("selector covers {n} samples, output has {rows}")));
        }
        Ok(())
    };
    let mut total = 0.0f64;
    match &selector.target {
        Target::ArgmaxLogit => {
            for r in 0..rows {
                let c = argmax(out.row(r));
                total += out.row(r)[c] as f64;
                grad.data_mut()[r * cols + c] = scale;
            }
        }
        Target::Classes(cls) => {
            check_len(cls.len())?;
            for (r, &c) in cls.iter().enumerate() {
                if c >= cols {
                    return Err(Error::SelectorOutOfRange { index: c, classes: cols });
                }
                total += out.row(r)[c] as f64;
                grad.data_mut()[r * cols + c] = scale;
            }
        }
        Target::CrossEntropy(labels) => {
            check_len(labels.len())?;
            if let Some(&c) = labels.iter().find(|&&c| c >= cols) {
                return Err(Error::SelectorOutOfRange { index: c, classes: cols });
            }
            let (sum, g) = loss::cross_entropy_sum(out, labels);
            total = sum;
            for (d, v) in grad.data_mut().iter_mut().zip(g.data()) {
                *d = v * scale;
            }
        }
        Target::Mse(target) => {
            if !target.same_shape(out) {
                return Err(Error::Shape(format!("mse target {:?} vs output {:?}", target.shape(), out.shape())));
            }
            let (sum, g) = loss::mse_sum(out, target);
            total = sum;
            for (d, v) in grad.data_mut().iter_mut().zip(g.data()) {
                *d = v * scale;
            }
        }
        Target::Seed(seed) => {
            if !seed.same_shape(out) {
                return Err(Error::Shape(format!("seed {:?} vs output {:?}", seed.shape(), out.shape())));
            }
            for ((d, &s), &o) in grad.data_mut().iter_mut().zip(seed.data()).zip(out.data()) {
                *d = s * scale;
                total += (s as f64) * (o as f64);
            }
        }
    }
    Ok((total * scale as f64) as f32)
}

/// Index of the largest entry; NaN entries are never selected unless all
/// entries are NaN, in which case 0 is returned.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    let mut found = false;
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if !found || v > best_v {
            best = i;
            best_v = v;
            found = true;
        }
    }
    best
}
