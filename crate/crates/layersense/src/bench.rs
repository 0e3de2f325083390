//! Criterion × reduction evaluation against the measured rankings.

use std::collections::BTreeMap;
use std::path::Path;

use layersense_core::criteria::{compute, Criterion, CriterionConfig, CriterionMap};
use layersense_core::modelzoo::Family;
use layersense_core::perturb::{NoiseKind, PerturbTarget};
use layersense_core::reduce::{reduce_map, LayerScores, ReduceMethod};
use layersense_core::rng::{derive_seed, tag};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::generate::{pool, subset};
use crate::report::{fmt6, write_csv, write_json, Provenance};
use crate::store::{Dataset, ModelEntry};

/// Criterion settings and calibration points used for `entry`. Noise seeds
/// are specialised per model.
pub fn criterion_setup(config: &RunConfig, ds: &Dataset, entry: &ModelEntry) -> (CriterionConfig, layersense_core::modelzoo::Split) {
    let settings = config.family(entry.model.spec.family);
    let mut params = settings.params;
    params.seed = derive_seed(params.seed, &[tag(&entry.id)]);
    (params, subset(&ds.data.calibration, settings.calib_subset))
}

pub fn criterion_map(config: &RunConfig, ds: &Dataset, entry: &ModelEntry, criterion: Criterion) -> Result<CriterionMap> {
    let (params, calib) = criterion_setup(config, ds, entry);
    Ok(compute(criterion, &entry.id, &entry.model, &calib, &params)?)
}

/// Reductions evaluated by the benchmark: the configured list followed by
/// the percentile sweep, without duplicates.
pub fn bench_reductions(config: &RunConfig) -> Vec<ReduceMethod> {
    let mut out: Vec<ReduceMethod> = Vec::new();
    let sweep = config.criteria.percentiles.iter().map(|&p| ReduceMethod::Percentile(p));
    for r in config.criteria.reductions.iter().copied().chain(sweep) {
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub family: Family,
    pub noise: NoiseKind,
    pub target: PerturbTarget,
    pub criterion: Criterion,
    pub reduction: ReduceMethod,
    pub n_models: usize,
    pub correct: usize,
    /// Percentage of models ranked exactly.
    pub rate: f64,
    /// Expected percentage for a uniformly random ordering.
    pub random_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionMean {
    pub reduction: ReduceMethod,
    pub hits: usize,
    pub trials: usize,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<Cell>,
    /// Pooled over every record and criterion.
    pub reductions: Vec<ReductionMean>,
    /// The percentile with the highest pooled rate.
    pub best_percentile: Option<ReductionMean>,
}

impl BenchReport {
    pub fn cell(
        &self,
        family: Family,
        noise: NoiseKind,
        target: PerturbTarget,
        criterion: Criterion,
        reduction: ReduceMethod,
    ) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.family == family && c.noise == noise && c.target == target && c.criterion == criterion && c.reduction == reduction
        })
    }

    pub fn reduction(&self, reduction: ReduceMethod) -> Option<&ReductionMean> {
        self.reductions.iter().find(|r| r.reduction == reduction)
    }
}

/// Scores of every configured criterion and reduction for one model.
pub fn model_scores(config: &RunConfig, ds: &Dataset, entry: &ModelEntry) -> Result<Vec<(Criterion, LayerScores)>> {
    let reductions = bench_reductions(config);
    let mut out = Vec::new();
    for &c in &config.criteria.list {
        let start = std::time::Instant::now();
        let map = criterion_map(config, ds, entry, c)?;
        log::debug!("{} {c}: {:?}", entry.id, start.elapsed());
        for &r in &reductions {
            out.push((c, reduce_map(&map, r)?));
        }
    }
    log::info!("{}: scored", entry.id);
    Ok(out)
}

pub fn run(config: &RunConfig, ds: &Dataset) -> Result<(BenchReport, Vec<Vec<(Criterion, LayerScores)>>)> {
    let scores: Vec<Result<Vec<(Criterion, LayerScores)>>> =
        pool(config.jobs)?.install(|| ds.models.par_iter().map(|m| model_scores(config, ds, m)).collect());
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let reductions = bench_reductions(config);

    type Key = (Family, NoiseKind, PerturbTarget, Criterion, usize);
    // (correct, models, summed random-hit probability)
    let mut cells: BTreeMap<Key, (usize, usize, f64)> = BTreeMap::new();
    let mut pooled = vec![(0usize, 0usize); reductions.len()];
    for (entry, model_scores) in ds.models.iter().zip(&scores) {
        for rec in ds.records_of(&entry.id) {
            let p = rec.random_hit_probability();
            for (c, s) in model_scores {
                let ri = reductions.iter().position(|r| *r == s.reduction).expect("known reduction");
                let hit = rec.accepts(&s.ranking);
                let cell = cells.entry((rec.family, rec.noise, rec.target, *c, ri)).or_default();
                cell.0 += hit as usize;
                cell.1 += 1;
                cell.2 += p;
                pooled[ri].0 += hit as usize;
                pooled[ri].1 += 1;
            }
        }
    }
    // Cells keyed by criterion order of the config, not enum order.
    let crit_pos = |c: Criterion| config.criteria.list.iter().position(|&x| x == c).unwrap_or(usize::MAX);
    let mut cells: Vec<Cell> = cells
        .into_iter()
        .map(|((family, noise, target, criterion, ri), (correct, n, p))| Cell {
            family,
            noise,
            target,
            criterion,
            reduction: reductions[ri],
            n_models: n,
            correct,
            rate: 100.0 * correct as f64 / n as f64,
            random_baseline: 100.0 * p / n as f64,
        })
        .collect();
    cells.sort_by_key(|c| {
        let ri = reductions.iter().position(|r| *r == c.reduction).unwrap_or(usize::MAX);
        (c.family, c.noise, c.target, crit_pos(c.criterion), ri)
    });
    let means: Vec<ReductionMean> = reductions
        .iter()
        .zip(&pooled)
        .map(|(&reduction, &(hits, trials))| ReductionMean {
            reduction,
            hits,
            trials,
            mean_rate: if trials == 0 { 0.0 } else { 100.0 * hits as f64 / trials as f64 },
        })
        .collect();
    let best_percentile = config
        .criteria
        .percentiles
        .iter()
        .filter_map(|&p| means.iter().find(|m| m.reduction == ReduceMethod::Percentile(p)))
        .fold(None::<&ReductionMean>, |best, m| match best {
            Some(b) if b.mean_rate >= m.mean_rate => Some(b),
            _ => Some(m),
        })
        .cloned();
    let report = BenchReport { cells, reductions: means, best_percentile };
    Ok((report, scores))
}

pub fn write(
    out: &Path,
    prov: &Provenance,
    ds: &Dataset,
    report: &BenchReport,
    scores: &[Vec<(Criterion, LayerScores)>],
) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.family.to_string(),
                c.noise.as_str().into(),
                c.target.as_str().into(),
                c.criterion.to_string(),
                c.reduction.to_string(),
                c.n_models.to_string(),
                c.correct.to_string(),
                fmt6(c.rate),
                fmt6(c.random_baseline),
            ]
        })
        .collect();
    write_csv(
        &out.join("bench_table.csv"),
        prov,
        &["family", "noise", "target", "criterion", "reduction", "n_models", "correct", "rate", "random_baseline"],
        &rows,
    )?;
    let mut rows: Vec<Vec<String>> = report
        .reductions
        .iter()
        .map(|m| vec![m.reduction.to_string(), m.hits.to_string(), m.trials.to_string(), fmt6(m.mean_rate)])
        .collect();
    if let Some(b) = &report.best_percentile {
        rows.push(vec![format!("best_percentile:{}", b.reduction), b.hits.to_string(), b.trials.to_string(), fmt6(b.mean_rate)]);
    }
    write_csv(&out.join("bench_reductions.csv"), prov, &["reduction", "hits", "trials", "mean_rate"], &rows)?;
    let mut rows = Vec::new();
    for (entry, ms) in ds.models.iter().zip(scores) {
        for (c, s) in ms {
            for (l, v) in s.scores.iter().enumerate() {
                rows.push(vec![
                    entry.id.clone(),
                    entry.model.spec.family.to_string(),
                    c.to_string(),
                    s.reduction.to_string(),
                    l.to_string(),
                    fmt6(*v as f64),
                ]);
            }
        }
    }
    write_csv(&out.join("scores.csv"), prov, &["model", "family", "criterion", "reduction", "layer", "score"], &rows)?;
    write_json(&out.join("bench.json"), prov, report)
}
