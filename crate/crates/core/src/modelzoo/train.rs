use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{MoonsDataset, Network, Split, TrainedModel};
use crate::autograd::{adam_step, argmax, AdamConfig, AdamState, Graph, OutputSelector};
use crate::rng::{rng_from, tag};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 32, adam: AdamConfig::default() }
    }
}

/// Trains with mean cross-entropy and Adam, reshuffling every epoch. For
/// stochastic depth each residual branch is kept with its survival
/// probability on every step; gates are reset to their evaluation value
/// afterwards. Zero epochs returns the initialization.
pub fn train(mut net: Network, data: &MoonsDataset, config: &TrainConfig) -> Result<TrainedModel> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let seed = net.spec.seed;
    let shapes: Vec<Vec<usize>> = net.graph.param_ids().map(|p| net.graph.param(p).shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = AdamState::new(config.adam, &shape_refs);
    let survival = net.spec.survival_prob;
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_from(seed, &[tag("train"), epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            if let Some(p) = survival {
                let mut rng = rng_from(seed, &[tag("depth"), step]);
                for &g in &net.gates {
                    let keep = rng.gen::<f32>() < p;
                    net.graph.set_gate(g, if keep { 1.0 } else { 0.0 });
                }
            }
            let (x, y) = gather(&data.train, chunk);
            net.graph.forward(&x)?;
            let loss = net.graph.backward(&OutputSelector::cross_entropy(y))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step: step as usize, loss });
            }
            let (mut params, grads) = net.graph.params_and_grads_mut()?;
            adam_step(&mut adam, &mut params, &grads)?;
            step += 1;
        }
    }
    net.set_eval();
    let train_accuracy = accuracy(&mut net.graph, &data.train)?;
    let test_accuracy = accuracy(&mut net.graph, &data.test)?;
    Ok(TrainedModel { spec: net.spec, graph: net.graph, layers: net.layers, train_accuracy, test_accuracy })
}

fn gather(split: &Split, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let mut xs = Vec::with_capacity(idx.len() * 2);
    for &i in idx {
        xs.extend_from_slice(split.inputs.row(i));
    }
    let x = Tensor::matrix(idx.len(), 2, xs).expect("gathered rows");
    (x, idx.iter().map(|&i| split.labels[i]).collect())
}

/// Predicted classes. A row of NaN logits predicts class 0.
pub fn predict(graph: &mut Graph, inputs: &Tensor) -> Result<Vec<usize>> {
    let out = graph.forward(inputs)?;
    Ok((0..out.rows()).map(|r| argmax(out.row(r))).collect())
}

/// Fraction of correctly classified points. Rows with non-finite logits
/// count as misclassified.
pub fn accuracy(graph: &mut Graph, split: &Split) -> Result<f32> {
    if split.is_empty() {
        return Err(Error::Empty("split"));
    }
    let out = graph.forward(&split.inputs)?;
    let correct = (0..out.rows())
        .filter(|&r| {
            let row = out.row(r);
            row.iter().all(|v| v.is_finite()) && argmax(row) == split.labels[r]
        })
        .count();
    Ok(correct as f32 / split.len() as f32)
}
