use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::probe::Probe;
use super::{Grids, NoiseKind, PerturbTarget, PerturbationSpec};
use crate::modelzoo::{Family, Split, TrainedModel};
use crate::reduce::argsort_desc;
use crate::rng::{derive_seed, tag};
use crate::{Error, Result};

/// Share of a bucket held by one ranking above which the bucket is flagged
/// as lacking diversity.
pub const DOMINANCE_THRESHOLD: f64 = 0.6;

/// Measured importance of every rankable layer of one model under one
/// perturbation family and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub model_id: String,
    pub family: Family,
    pub noise: NoiseKind,
    pub target: PerturbTarget,
    pub clean_accuracy: f32,
    /// Mean accuracy drop per layer over all levels and draws, floored at 0.
    pub accuracy_drops: Vec<f32>,
    /// Mean logit distance per layer over all levels and draws.
    pub output_distances: Vec<f32>,
    /// `[level][layer]` mean drops before flooring.
    pub level_drops: Vec<Vec<f32>>,
    pub level_distances: Vec<Vec<f32>>,
    /// Layers by decreasing drop, ties broken by index.
    pub ranking: Vec<usize>,
    /// Consecutive runs of `ranking` whose drops are within the tie epsilon.
    pub tie_groups: Vec<Vec<usize>>,
    /// Ranking induced by each level separately.
    pub level_rankings: Vec<Vec<usize>>,
}

impl GroundTruthRecord {
    pub fn num_layers(&self) -> usize {
        self.ranking.len()
    }

    /// Tie-group index of every layer.
    pub fn group_of(&self) -> Vec<usize> {
        let mut g = vec![0; self.num_layers()];
        for (i, group) in self.tie_groups.iter().enumerate() {
            for &l in group {
                g[l] = i;
            }
        }
        g
    }

    /// Whether `predicted` orders the layers consistently with the ground
    /// truth, allowing any order inside a tie group.
    pub fn accepts(&self, predicted: &[usize]) -> bool {
        if predicted.len() != self.num_layers() {
            return false;
        }
        let group = self.group_of();
        let mut seen = vec![false; predicted.len()];
        for &l in predicted {
            if l >= seen.len() || core::mem::replace(&mut seen[l], true) {
                return false;
            }
        }
        predicted.windows(2).all(|w| group[w[0]] <= group[w[1]])
    }

    /// Probability that a uniformly random permutation is accepted:
    /// `prod |g|! / L!`.
    pub fn random_hit_probability(&self) -> f64 {
        let ln = |n: usize| libm::lgamma(n as f64 + 1.0);
        let num: f64 = self.tie_groups.iter().map(|g| ln(g.len())).sum();
        libm::exp(num - ln(self.num_layers()))
    }
}

/// Splits `ranking` (sorted by decreasing `values`) into maximal runs whose
/// consecutive values differ by less than `epsilon`.
pub fn tie_groups(values: &[f32], ranking: &[usize], epsilon: f32) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &l in ranking {
        match groups.last_mut() {
            Some(g) if values[*g.last().expect("groups are nonempty")] - values[l] < epsilon => g.push(l),
            _ => groups.push(vec![l]),
        }
    }
    groups
}

/// Measures every rankable layer of `model` over the grid levels of `noise`
/// and ranks layers by mean accuracy drop.
///
/// Draw seeds derive from `seed` (itself derived from the dataset seed and
/// model id), the noise family and target, the layer, the level and the
/// draw index, so results do not depend on evaluation order.
pub fn ground_truth(
    model: &TrainedModel,
    model_id: &str,
    noise: NoiseKind,
    target: PerturbTarget,
    grids: &Grids,
    test: &Split,
    seed: u64,
) -> Result<GroundTruthRecord> {
    let levels = grids.levels(noise);
    if levels.is_empty() {
        return Err(Error::Empty("noise grid"));
    }
    let n_layers = model.num_layers();
    let mut probe = Probe::new(model, test)?;
    let mut level_drops = vec![vec![0.0f32; n_layers]; levels.len()];
    let mut level_distances = level_drops.clone();
    // Later layers first: each measurement then only invalidates cached
    // values that the next one recomputes anyway.
    for layer in (0..n_layers).rev() {
        for (li, &(proportion, sigma_fraction)) in levels.iter().enumerate() {
            let spec = PerturbationSpec {
                kind: noise,
                target,
                proportion,
                sigma_fraction,
                n_draws: grids.n_draws,
                seed: derive_seed(seed, &[tag(noise.as_str()), tag(target.as_str()), layer as u64, li as u64]),
            };
            let imp = probe.measure(layer, &spec)?;
            level_drops[li][layer] = imp.accuracy_drop;
            level_distances[li][layer] = imp.output_distance;
        }
    }
    let mean = |rows: &[Vec<f32>], l: usize| (rows.iter().map(|r| r[l] as f64).sum::<f64>() / rows.len() as f64) as f32;
    let accuracy_drops: Vec<f32> = (0..n_layers).map(|l| mean(&level_drops, l).max(0.0)).collect();
    let output_distances: Vec<f32> = (0..n_layers).map(|l| mean(&level_distances, l)).collect();
    let ranking = argsort_desc(&accuracy_drops);
    let tie_groups = tie_groups(&accuracy_drops, &ranking, grids.tie_epsilon);
    let level_rankings = level_drops.iter().map(|d| argsort_desc(d)).collect();
    Ok(GroundTruthRecord {
        model_id: model_id.into(),
        family: model.spec.family,
        noise,
        target,
        clean_accuracy: probe.clean_accuracy(),
        accuracy_drops,
        output_distances,
        level_drops,
        level_distances,
        ranking,
        tie_groups,
        level_rankings,
    })
}

/// Ranking diversity of one (family, noise, target, layer count) bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDiversity {
    pub family: Family,
    pub noise: NoiseKind,
    pub target: PerturbTarget,
    pub n_layers: usize,
    pub n_records: usize,
    pub n_distinct: usize,
    /// Share of the most frequent ranking.
    pub top_share: f64,
    /// Shannon entropy (nats) of the empirical ranking distribution.
    pub entropy: f64,
    /// Entropy divided by `ln(min(L!, n_records))`, the largest value
    /// reachable with this many records.
    pub normalized_entropy: f64,
    /// Set when one ranking holds more than 60% of the bucket.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub buckets: Vec<BucketDiversity>,
}

/// Groups records by family, noise, target and number of rankable layers
/// (rankings of different lengths are not comparable) and reports the
/// entropy of each bucket's ranking distribution.
pub fn audit_diversity(records: &[GroundTruthRecord]) -> Result<DiversityReport> {
    if records.is_empty() {
        return Err(Error::Empty("ground-truth records"));
    }
    type Key = (Family, NoiseKind, PerturbTarget, usize);
    let mut buckets: BTreeMap<Key, BTreeMap<&[usize], usize>> = BTreeMap::new();
    for r in records {
        let key = (r.family, r.noise, r.target, r.num_layers());
        *buckets.entry(key).or_default().entry(r.ranking.as_slice()).or_default() += 1;
    }
    let buckets = buckets
        .into_iter()
        .map(|((family, noise, target, n_layers), counts)| {
            let n: usize = counts.values().sum();
            let top = counts.values().copied().max().unwrap_or(0);
            let entropy: f64 = counts
                .values()
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    -p * libm::log(p)
                })
                .sum();
            let norm = libm::lgamma(n_layers as f64 + 1.0).min(libm::log(n as f64));
            let top_share = top as f64 / n as f64;
            BucketDiversity {
                family,
                noise,
                target,
                n_layers,
                n_records: n,
                n_distinct: counts.len(),
                top_share,
                entropy,
                normalized_entropy: if norm > 0.0 { (entropy / norm).min(1.0) } else { 0.0 },
                flagged: top_share > DOMINANCE_THRESHOLD,
            }
        })
        .collect();
    Ok(DiversityReport { buckets })
}
