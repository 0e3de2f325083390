use serde::{Deserialize, Serialize};

use super::noise::{apply_noise, noise_scale};
use super::{NoiseKind, PerturbTarget, PerturbationSpec};
use crate::autograd::{argmax, Graph, NodeId};
use crate::modelzoo::{LayerHandle, Split, TrainedModel};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Mean effect of one perturbation level on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    /// Clean accuracy minus perturbed accuracy.
    pub accuracy_drop: f32,
    /// Mean L2 distance between perturbed and clean logits.
    pub output_distance: f32,
}

#[derive(Debug, Clone, Copy)]
struct ActivationNoise {
    site: NodeId,
    kind: NoiseKind,
    proportion: f32,
    scale: f32,
    seed: u64,
}

/// A copy of a model carrying one drawn perturbation. Weight noise is baked
/// into the copy; activation noise is redrawn identically on every forward.
#[derive(Debug, Clone)]
pub struct PerturbedModel {
    graph: Graph,
    activation: Option<ActivationNoise>,
}

impl PerturbedModel {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn forward(&mut self, inputs: &Tensor) -> Result<Tensor> {
        match self.activation {
            None => Ok(self.graph.forward(inputs)?.clone()),
            Some(a) => {
                let mut rng = rng_from(a.seed, &[]);
                let mut hook = |node: NodeId, t: &mut Tensor| {
                    if node == a.site {
                        apply_noise(a.kind, t.data_mut(), a.proportion, a.scale, &mut rng);
                    }
                };
                Ok(self.graph.forward_hooked(inputs, &mut hook)?.clone())
            }
        }
    }
}

/// Draws one perturbation of `layer` and returns the perturbed copy. The
/// model itself is left untouched.
pub fn apply_perturbation(model: &TrainedModel, layer: usize, spec: &PerturbationSpec, draw_seed: u64) -> Result<PerturbedModel> {
    spec.validate()?;
    let h = model.layer(layer)?;
    let mut graph = model.graph.detached();
    graph.set_check_finite(false);
    let scale = noise_scale(spec.sigma_fraction, graph.param(h.weight).data());
    let activation = match spec.target {
        PerturbTarget::Weights => {
            let mut rng = rng_from(draw_seed, &[]);
            apply_noise(spec.kind, graph.param_mut(h.weight).data_mut(), spec.proportion, scale, &mut rng);
            None
        }
        PerturbTarget::Activations => Some(ActivationNoise {
            site: h.site,
            kind: spec.kind,
            proportion: spec.proportion,
            scale,
            seed: draw_seed,
        }),
    };
    Ok(PerturbedModel { graph, activation })
}

/// Mean accuracy drop and logit distance of `spec` on `layer`, averaged over
/// `spec.n_draws` draws seeded from `spec.seed`.
pub fn measure_importance(model: &TrainedModel, layer: usize, spec: &PerturbationSpec, test: &Split) -> Result<Importance> {
    Probe::new(model, test)?.measure(layer, spec)
}

/// Repeated perturbation measurements against one cached clean forward
/// pass. Each measurement only recomputes the part of the network at and
/// after the perturbed node.
pub struct Probe<'a> {
    graph: Graph,
    layers: &'a [LayerHandle],
    labels: &'a [usize],
    clean: Tensor,
    clean_accuracy: f32,
    /// Earliest node whose cached value may differ from the clean pass.
    dirty: Option<NodeId>,
}

impl<'a> Probe<'a> {
    pub fn new(model: &'a TrainedModel, test: &'a Split) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Empty("test split"));
        }
        let mut graph = model.graph.detached();
        graph.set_check_finite(false);
        let clean = graph.forward(&test.inputs)?.clone();
        let correct = count_correct(&clean, &test.labels);
        Ok(Self {
            graph,
            layers: &model.layers,
            labels: &test.labels,
            clean,
            clean_accuracy: correct as f32 / test.len() as f32,
            dirty: None,
        })
    }

    pub fn clean_accuracy(&self) -> f32 {
        self.clean_accuracy
    }

    pub fn clean_logits(&self) -> &Tensor {
        &self.clean
    }

    pub fn measure(&mut self, layer: usize, spec: &PerturbationSpec) -> Result<Importance> {
        spec.validate()?;
        let (mut drop, mut dist) = (0.0f64, 0.0f64);
        for d in 0..spec.n_draws {
            let (acc, distance) = self.draw(layer, spec, derive_seed(spec.seed, &[d as u64]))?;
            drop += (self.clean_accuracy - acc) as f64;
            dist += distance as f64;
        }
        let n = spec.n_draws as f64;
        Ok(Importance { accuracy_drop: (drop / n) as f32, output_distance: (dist / n) as f32 })
    }

    /// Accuracy and mean logit distance under one drawn perturbation.
    pub fn draw(&mut self, layer: usize, spec: &PerturbationSpec, draw_seed: u64) -> Result<(f32, f32)> {
        let h = self.layers.get(layer).ok_or(Error::InvalidLayer(layer))?.clone();
        let start = match spec.target {
            PerturbTarget::Weights => h.matmul,
            PerturbTarget::Activations => h.site,
        };
        if let Some(d) = self.dirty.filter(|&d| d < start) {
            self.graph.rerun_from(d, &mut |_, _| {})?;
        }
        self.dirty = Some(self.dirty.map_or(start, |d| d.min(start)));
        let scale = noise_scale(spec.sigma_fraction, self.graph.param(h.weight).data());
        let mut rng = rng_from(draw_seed, &[]);
        let out = match spec.target {
            PerturbTarget::Weights => {
                let saved = self.graph.param(h.weight).clone();
                apply_noise(spec.kind, self.graph.param_mut(h.weight).data_mut(), spec.proportion, scale, &mut rng);
                let out = self.graph.rerun_from(start, &mut |_, _| {}).cloned();
                *self.graph.param_mut(h.weight) = saved;
                out?
            }
            PerturbTarget::Activations => {
                let mut hook = |node: NodeId, t: &mut Tensor| {
                    if node == h.site {
                        apply_noise(spec.kind, t.data_mut(), spec.proportion, scale, &mut rng);
                    }
                };
                self.graph.rerun_from(start, &mut hook)?.clone()
            }
        };
        let acc = count_correct(&out, self.labels) as f32 / self.labels.len() as f32;
        Ok((acc, mean_logit_distance(&out, &self.clean)))
    }
}

/// Rows with any non-finite logit count as misclassified.
pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            row.iter().all(|v| v.is_finite()) && argmax(row) == labels[r]
        })
        .count()
}

/// Mean per-sample L2 distance between two logit matrices; rows where the
/// perturbed logits are not finite are left out.
pub fn mean_logit_distance(a: &Tensor, b: &Tensor) -> f32 {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for r in 0..a.rows() {
        let d: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| { let d = (x - y) as f64; d * d }).sum();
        if d.is_finite() {
            total += libm::sqrt(d);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (total / n as f64) as f32
    }
}

