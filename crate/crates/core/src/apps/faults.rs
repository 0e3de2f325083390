use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::modelzoo::{LayerHandle, Split, TrainedModel};
use crate::perturb::count_correct;
use crate::reduce::argsort_desc;
use crate::rng::rng_from;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Weights,
    Activations,
    Both,
}

/// Random single-bit flips in binary32 values, `flip_rate` expected flips
/// per forward pass over the test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultCampaign {
    pub flip_rate: f64,
    pub target: FaultTarget,
    pub n_trials: usize,
    pub seed: u64,
}

/// Inverts bit `bit` (0 = least significant mantissa bit, 31 = sign).
pub fn flip_bit(v: f32, bit: u32) -> f32 {
    f32::from_bits(v.to_bits() ^ (1u32 << bit))
}

#[derive(Debug, Clone, Copy)]
struct Flip {
    layer: usize,
    on_weights: bool,
    /// Position in `[0, 1)` scaled to the element count of the target.
    position: f64,
    bit: u32,
}

/// Draws the flips of one trial. The draw does not depend on which layers
/// are checked, so campaigns at different `n_unchecked` see the same faults.
fn draw_flips(campaign: &FaultCampaign, n_layers: usize, trial: usize) -> Result<Vec<Flip>> {
    let mut rng = rng_from(campaign.seed, &[trial as u64]);
    let count = if campaign.flip_rate > 0.0 {
        let p = Poisson::new(campaign.flip_rate).map_err(|e| Error::InvalidArgument(format!("flip rate: {e}")))?;
        p.sample(&mut rng) as usize
    } else {
        0
    };
    Ok((0..count)
        .map(|_| {
            let layer = rng.gen_range(0..n_layers);
            let on_weights = match campaign.target {
                FaultTarget::Weights => true,
                FaultTarget::Activations => false,
                FaultTarget::Both => rng.gen::<bool>(),
            };
            Flip { layer, on_weights, position: rng.gen::<f64>(), bit: rng.gen_range(0..32) }
        })
        .collect())
}

fn index(position: f64, len: usize) -> usize {
    ((position * len as f64) as usize).min(len - 1)
}

struct Runner<'a> {
    graph: Graph,
    layers: &'a [LayerHandle],
    test: &'a Split,
    clean_accuracy: f32,
}

impl<'a> Runner<'a> {
    fn new(model: &'a TrainedModel, test: &'a Split) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Empty("test split"));
        }
        let mut graph = model.graph.detached();
        graph.set_check_finite(false);
        let out = graph.forward(&test.inputs)?;
        let clean_accuracy = count_correct(out, &test.labels) as f32 / test.len() as f32;
        Ok(Self { graph, layers: &model.layers, test, clean_accuracy })
    }

    /// Accuracy with the flips that land in unchecked layers; flips in
    /// checked layers are detected by duplicate computation and reverted,
    /// which leaves the computation untouched.
    fn trial(&mut self, flips: &[Flip], checked: &[bool]) -> Result<f32> {
        let live: Vec<Flip> = flips.iter().copied().filter(|f| !checked[f.layer]).collect();
        if live.is_empty() {
            return Ok(self.clean_accuracy);
        }
        let mut saved = Vec::new();
        for f in live.iter().filter(|f| f.on_weights) {
            let w = self.layers[f.layer].weight;
            let data = self.graph.param_mut(w).data_mut();
            let i = index(f.position, data.len());
            saved.push((w, i, data[i]));
            data[i] = flip_bit(data[i], f.bit);
        }
        let sites: Vec<(NodeId, Flip)> =
            live.iter().filter(|f| !f.on_weights).map(|f| (self.layers[f.layer].site, *f)).collect();
        let mut hook = |node: NodeId, t: &mut Tensor| {
            for (site, f) in &sites {
                if *site == node {
                    let data = t.data_mut();
                    let i = index(f.position, data.len());
                    data[i] = flip_bit(data[i], f.bit);
                }
            }
        };
        let result = self.graph.forward_hooked(&self.test.inputs, &mut hook).map(|out| count_correct(out, &self.test.labels));
        for (w, i, v) in saved.into_iter().rev() {
            self.graph.param_mut(w).data_mut()[i] = v;
        }
        Ok(result? as f32 / self.test.len() as f32)
    }
}

/// Checked-layer mask leaving the `n_unchecked` least sensitive layers
/// unchecked.
fn checked_mask(scores: &[f32], n_unchecked: usize) -> Vec<bool> {
    let order = argsort_desc(scores);
    let mut checked = vec![true; scores.len()];
    for &l in &order[scores.len() - n_unchecked..] {
        checked[l] = false;
    }
    checked
}

/// Mean accuracy over the campaign's trials when only the `n_unchecked`
/// least sensitive layers (by `scores`) run without verification.
pub fn inject_and_check(
    model: &TrainedModel,
    campaign: &FaultCampaign,
    scores: &[f32],
    n_unchecked: usize,
    test: &Split,
) -> Result<f32> {
    let curve = run(model, campaign, scores, &[n_unchecked], test)?;
    Ok(curve[0].mean_accuracy)
}

/// One point of an accuracy-versus-unchecked-layers curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_unchecked: usize,
    pub mean_accuracy: f32,
    /// Half-width of the normal 95% interval of the mean.
    pub ci95: f32,
    pub trials: usize,
}

/// Accuracy for `n_unchecked = 0..=L`, all points sharing the same faults.
pub fn robustness_curve(model: &TrainedModel, campaign: &FaultCampaign, scores: &[f32], test: &Split) -> Result<Vec<CurvePoint>> {
    let counts: Vec<usize> = (0..=model.num_layers()).collect();
    run(model, campaign, scores, &counts, test)
}

fn run(model: &TrainedModel, campaign: &FaultCampaign, scores: &[f32], counts: &[usize], test: &Split) -> Result<Vec<CurvePoint>> {
    let n_layers = model.num_layers();
    if scores.len() != n_layers {
        return Err(Error::InvalidArgument(format!("{} scores for {n_layers} layers", scores.len())));
    }
    if let Some(&c) = counts.iter().find(|&&c| c > n_layers) {
        return Err(Error::InvalidArgument(format!("{c} unchecked layers out of {n_layers}")));
    }
    if !(campaign.flip_rate >= 0.0) || campaign.n_trials == 0 {
        return Err(Error::InvalidArgument("flip rate must be non-negative and trials positive".into()));
    }
    let mut runner = Runner::new(model, test)?;
    let masks: Vec<Vec<bool>> = counts.iter().map(|&c| checked_mask(scores, c)).collect();
    let mut acc = vec![Vec::with_capacity(campaign.n_trials); counts.len()];
    for t in 0..campaign.n_trials {
        let flips = draw_flips(campaign, n_layers, t)?;
        for (m, mask) in masks.iter().enumerate() {
            acc[m].push(runner.trial(&flips, mask)?);
        }
    }
    Ok(counts
        .iter()
        .zip(acc)
        .map(|(&n_unchecked, a)| {
            let n = a.len() as f64;
            let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = if a.len() > 1 { a.iter().map(|&v| { let d = v as f64 - mean; d * d }).sum::<f64>() / (n - 1.0) } else { 0.0 };
            CurvePoint {
                n_unchecked,
                mean_accuracy: mean as f32,
                ci95: (1.96 * libm::sqrt(var / n)) as f32,
                trials: a.len(),
            }
        })
        .collect())
}
