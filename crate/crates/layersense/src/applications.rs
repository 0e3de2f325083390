//! Pruning, quantization and fault-tolerance pipelines over dataset models.

use std::collections::BTreeMap;
use std::path::Path;

use layersense_core::apps::{
    allocate_rates, prunable_layers, prune, pruning_budget, quantization_budget, quantize, robustness_curve,
    CurvePoint, FaultCampaign, Plan,
};
use layersense_core::criteria::{Criterion, CriterionMap};
use layersense_core::modelzoo::{accuracy, Family};
use layersense_core::reduce::{reduce_map, ReduceMethod};
use layersense_core::rng::{derive_seed, rng_from, tag};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::criterion_map;
use crate::config::{RunConfig, Selection};
use crate::error::{AppError, Result};
use crate::generate::pool;
use crate::report::{fmt6, write_csv, write_json, Provenance};
use crate::store::{Dataset, ModelEntry};

pub const UNIFORM: &str = "uniform";

/// Models picked by a selection, in dataset order.
pub fn select<'a>(ds: &'a Dataset, sel: &Selection) -> Result<Vec<&'a ModelEntry>> {
    if let Some(id) = &sel.model {
        return ds.model(id).map(|m| vec![m]).ok_or_else(|| AppError::Config(format!("unknown model id {id:?}")));
    }
    let mut taken: BTreeMap<Family, usize> = BTreeMap::new();
    Ok(ds
        .models
        .iter()
        .filter(|m| {
            let f = m.model.spec.family;
            if !sel.families.contains(&f) {
                return false;
            }
            let n = taken.entry(f).or_default();
            *n += 1;
            sel.max_models.map_or(true, |max| *n <= max)
        })
        .collect())
}

fn maps_for(config: &RunConfig, ds: &Dataset, entry: &ModelEntry, criteria: &[Criterion]) -> Result<BTreeMap<Criterion, CriterionMap>> {
    let mut maps = BTreeMap::new();
    for &c in criteria {
        if !maps.contains_key(&c) {
            maps.insert(c, criterion_map(config, ds, entry, c)?);
        }
    }
    Ok(maps)
}

fn scores(map: &CriterionMap, reduction: ReduceMethod) -> Result<Vec<f32>> {
    Ok(reduce_map(map, reduction)?.scores)
}

/// Which ordering or budget source produced a row: a criterion id or
/// `uniform` / `randomN`.
fn source(c: Criterion) -> String {
    c.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRecord {
    pub model: String,
    pub source: String,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub model: String,
    pub family: Family,
    pub inter: String,
    pub intra: Criterion,
    pub clean_accuracy: f32,
    pub accuracy: f32,
}

pub fn run_prune(config: &RunConfig, ds: &Dataset) -> Result<(Vec<PruneRow>, Vec<PlanRecord>)> {
    let models = select(ds, &config.prune.select)?;
    let per_model: Vec<Result<(Vec<PruneRow>, Vec<PlanRecord>)>> =
        pool(config.jobs)?.install(|| models.par_iter().map(|m| prune_one(config, ds, m)).collect());
    let mut rows = Vec::new();
    let mut plans = Vec::new();
    for r in per_model {
        let (r, p) = r?;
        rows.extend(r);
        plans.extend(p);
    }
    Ok((rows, plans))
}

fn prune_one(config: &RunConfig, ds: &Dataset, entry: &ModelEntry) -> Result<(Vec<PruneRow>, Vec<PlanRecord>)> {
    let cfg = &config.prune;
    let model = &entry.model;
    let needed: Vec<Criterion> = cfg.inter.iter().chain(&cfg.intra).copied().collect();
    let maps = maps_for(config, ds, entry, &needed)?;
    let allowed = prunable_layers(model, cfg.mode);
    let sizes: Vec<usize> = model.layer_sizes().into_iter().zip(&allowed).filter(|(_, &a)| a).map(|(s, _)| s).collect();
    let expand = |sub: Vec<f64>, clamped_sub: Vec<bool>| {
        let mut it = sub.into_iter().zip(clamped_sub);
        let (rates, clamped): (Vec<f64>, Vec<bool>) =
            allowed.iter().map(|&a| if a { it.next().expect("one rate per prunable layer") } else { (0.0, false) }).unzip();
        Plan::Prune { rates, clamped }
    };
    let mut sources: Vec<(String, Plan)> = Vec::new();
    let zero = || expand(vec![0.0; sizes.len()], vec![false; sizes.len()]);
    let uniform = if cfg.gamma == 0.0 {
        zero()
    } else {
        let r = allocate_rates(&vec![1.0; sizes.len()], &sizes, cfg.gamma)?;
        expand(r.rates, r.clamped)
    };
    sources.push((UNIFORM.into(), uniform));
    for &c in &cfg.inter {
        let plan = if cfg.gamma == 0.0 {
            zero()
        } else {
            let s = scores(&maps[&c], cfg.reduction)?;
            let sub: Vec<f32> = s.into_iter().zip(&allowed).filter(|(_, &a)| a).map(|(v, _)| v).collect();
            let r = pruning_budget(&sub, &sizes, cfg.gamma)?;
            expand(r.rates, r.clamped)
        };
        sources.push((source(c), plan));
    }
    let clean = accuracy(&mut model.graph.detached(), &ds.data.test)?;
    let mut rows = Vec::new();
    for (name, plan) in &sources {
        let Plan::Prune { rates, .. } = plan else { unreachable!("prune plans only") };
        for &intra in &cfg.intra {
            let mut pruned = prune(model, rates, &maps[&intra], cfg.mode, cfg.intra_reduction)?;
            let acc = accuracy(&mut pruned.graph, &ds.data.test)?;
            rows.push(PruneRow {
                model: entry.id.clone(),
                family: model.spec.family,
                inter: name.clone(),
                intra,
                clean_accuracy: clean,
                accuracy: acc,
            });
        }
    }
    log::info!("{}: pruned", entry.id);
    let plans = sources.into_iter().map(|(source, plan)| PlanRecord { model: entry.id.clone(), source, plan }).collect();
    Ok((rows, plans))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantRow {
    pub model: String,
    pub family: Family,
    pub assignment: String,
    pub weight_bits: Vec<u32>,
    pub clean_accuracy: f32,
    pub accuracy: f32,
}

pub fn run_quant(config: &RunConfig, ds: &Dataset) -> Result<(Vec<QuantRow>, Vec<PlanRecord>)> {
    let models = select(ds, &config.quant.select)?;
    let per_model: Vec<Result<(Vec<QuantRow>, Vec<PlanRecord>)>> =
        pool(config.jobs)?.install(|| models.par_iter().map(|m| quant_one(config, ds, m)).collect());
    let mut rows = Vec::new();
    let mut plans = Vec::new();
    for r in per_model {
        let (r, p) = r?;
        rows.extend(r);
        plans.extend(p);
    }
    Ok((rows, plans))
}

fn quant_one(config: &RunConfig, ds: &Dataset, entry: &ModelEntry) -> Result<(Vec<QuantRow>, Vec<PlanRecord>)> {
    let cfg = &config.quant;
    let model = &entry.model;
    let maps = maps_for(config, ds, entry, &cfg.criteria)?;
    let mut assignments = vec![(UNIFORM.to_string(), vec![cfg.target_bits; model.num_layers()])];
    for &c in &cfg.criteria {
        let (bits, warned) = quantization_budget(&scores(&maps[&c], cfg.reduction)?, cfg.target_bits)?;
        if warned {
            log::warn!("{}: fewer than three layers, {c} falls back to uniform bits", entry.id);
        }
        assignments.push((source(c), bits));
    }
    let clean = accuracy(&mut model.graph.detached(), &ds.data.test)?;
    let mut rows = Vec::new();
    let mut plans = Vec::new();
    for (name, bits) in assignments {
        let acc = quantize(model, &bits, cfg.activation_bits, &ds.data.calibration)?.accuracy(&ds.data.test)?;
        rows.push(QuantRow {
            model: entry.id.clone(),
            family: model.spec.family,
            assignment: name.clone(),
            weight_bits: bits.clone(),
            clean_accuracy: clean,
            accuracy: acc,
        });
        let plan = Plan::Quantize { weight_bits: bits, activation_bits: cfg.activation_bits.unwrap_or(32) };
        plans.push(PlanRecord { model: entry.id.clone(), source: name, plan });
    }
    log::info!("{}: quantized", entry.id);
    Ok((rows, plans))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustCurve {
    pub model: String,
    pub family: Family,
    pub ordering: String,
    pub points: Vec<CurvePoint>,
    pub auc: f64,
}

/// Normalized area under an accuracy-versus-unchecked curve (trapezoid
/// rule over `n_unchecked / L`). A single point is its own value.
pub fn auc(points: &[CurvePoint]) -> f64 {
    match points.len() {
        0 => 0.0,
        1 => points[0].mean_accuracy as f64,
        n => {
            let area: f64 = points.windows(2).map(|w| (w[0].mean_accuracy as f64 + w[1].mean_accuracy as f64) / 2.0).sum();
            area / (n - 1) as f64
        }
    }
}

pub fn run_robust(config: &RunConfig, ds: &Dataset) -> Result<Vec<RobustCurve>> {
    let models = select(ds, &config.robust.select)?;
    let per_model: Vec<Result<Vec<RobustCurve>>> =
        pool(config.jobs)?.install(|| models.par_iter().map(|m| robust_one(config, ds, m)).collect());
    Ok(per_model.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn robust_one(config: &RunConfig, ds: &Dataset, entry: &ModelEntry) -> Result<Vec<RobustCurve>> {
    let cfg = &config.robust;
    let model = &entry.model;
    let campaign = FaultCampaign {
        flip_rate: cfg.flip_rate,
        target: cfg.target,
        n_trials: cfg.n_trials,
        seed: derive_seed(config.seed, &[tag("faults"), tag(&entry.id)]),
    };
    let maps = maps_for(config, ds, entry, &cfg.criteria)?;
    let mut orderings: Vec<(String, Vec<f32>)> = Vec::new();
    for &c in &cfg.criteria {
        orderings.push((source(c), scores(&maps[&c], cfg.reduction)?));
    }
    let n = model.num_layers();
    for r in 0..cfg.random_orders {
        let mut perm: Vec<f32> = (0..n).map(|l| l as f32).collect();
        perm.shuffle(&mut rng_from(config.seed, &[tag("order"), tag(&entry.id), r as u64]));
        orderings.push((format!("random{r}"), perm));
    }
    let mut curves = Vec::with_capacity(orderings.len());
    for (name, s) in orderings {
        let points = robustness_curve(model, &campaign, &s, &ds.data.test)?;
        curves.push(RobustCurve {
            model: entry.id.clone(),
            family: model.spec.family,
            ordering: name,
            auc: auc(&points),
            points,
        });
    }
    log::info!("{}: fault campaign done", entry.id);
    Ok(curves)
}

/// Mean AUC of the random orderings of each model.
pub fn random_auc(curves: &[RobustCurve]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for c in curves.iter().filter(|c| c.ordering.starts_with("random")) {
        let e = acc.entry(c.model.clone()).or_default();
        e.0 += c.auc;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Wins, ties and losses of `value` against `reference` per model.
fn tally<'a>(pairs: impl Iterator<Item = (f64, f64)> + 'a) -> (usize, usize, usize) {
    pairs.fold((0, 0, 0), |(w, t, l), (v, r)| {
        if v > r {
            (w + 1, t, l)
        } else if v == r {
            (w, t + 1, l)
        } else {
            (w, t, l + 1)
        }
    })
}

pub fn write_prune(out: &Path, prov: &Provenance, config: &RunConfig, rows: &[PruneRow], plans: &[PlanRecord]) -> Result<()> {
    let gamma = fmt6(config.prune.gamma);
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.family.to_string(),
                r.inter.clone(),
                r.intra.to_string(),
                gamma.clone(),
                fmt6(r.clean_accuracy as f64),
                fmt6(r.accuracy as f64),
            ]
        })
        .collect();
    write_csv(
        &out.join("prune_models.csv"),
        prov,
        &["model", "family", "inter", "intra", "gamma", "clean_accuracy", "accuracy"],
        &csv_rows,
    )?;
    let mut matrix = Vec::new();
    let inters: Vec<String> = std::iter::once(UNIFORM.to_string()).chain(config.prune.inter.iter().map(|c| source(*c))).collect();
    for inter in &inters {
        for &intra in &config.prune.intra {
            let cell: Vec<&PruneRow> = rows.iter().filter(|r| &r.inter == inter && r.intra == intra).collect();
            let baseline = |m: &str| {
                rows.iter().find(|r| r.model == m && r.inter == UNIFORM && r.intra == intra).map(|r| r.accuracy as f64)
            };
            let (w, t, l) = tally(cell.iter().filter_map(|r| baseline(&r.model).map(|b| (r.accuracy as f64, b))));
            let n = cell.len().max(1) as f64;
            matrix.push(vec![
                inter.clone(),
                intra.to_string(),
                cell.len().to_string(),
                fmt6(cell.iter().map(|r| r.accuracy as f64).sum::<f64>() / n),
                fmt6(cell.iter().map(|r| (r.clean_accuracy - r.accuracy) as f64).sum::<f64>() / n),
                w.to_string(),
                t.to_string(),
                l.to_string(),
            ]);
        }
    }
    write_csv(
        &out.join("prune_matrix.csv"),
        prov,
        &["inter", "intra", "n_models", "mean_accuracy", "mean_drop", "wins_vs_uniform", "ties", "losses"],
        &matrix,
    )?;
    write_json(&out.join("prune_plans.json"), prov, &serde_json::json!({ "plans": plans }))
}

pub fn write_quant(out: &Path, prov: &Provenance, config: &RunConfig, rows: &[QuantRow], plans: &[PlanRecord]) -> Result<()> {
    let act = config.quant.activation_bits.map_or_else(|| "none".to_string(), |b| b.to_string());
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.family.to_string(),
                r.assignment.clone(),
                r.weight_bits.iter().map(u32::to_string).collect::<Vec<_>>().join(";"),
                act.clone(),
                fmt6(r.clean_accuracy as f64),
                fmt6(r.accuracy as f64),
            ]
        })
        .collect();
    write_csv(
        &out.join("quant_models.csv"),
        prov,
        &["model", "family", "assignment", "weight_bits", "activation_bits", "clean_accuracy", "accuracy"],
        &csv_rows,
    )?;
    let names: Vec<String> = std::iter::once(UNIFORM.to_string()).chain(config.quant.criteria.iter().map(|c| source(*c))).collect();
    let summary: Vec<Vec<String>> = names
        .iter()
        .map(|name| {
            let cell: Vec<&QuantRow> = rows.iter().filter(|r| &r.assignment == name).collect();
            let baseline =
                |m: &str| rows.iter().find(|r| r.model == m && r.assignment == UNIFORM).map(|r| r.accuracy as f64);
            let (w, t, l) = tally(cell.iter().filter_map(|r| baseline(&r.model).map(|b| (r.accuracy as f64, b))));
            let n = cell.len().max(1) as f64;
            vec![
                name.clone(),
                cell.len().to_string(),
                fmt6(cell.iter().map(|r| r.accuracy as f64).sum::<f64>() / n),
                w.to_string(),
                t.to_string(),
                l.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("quant_summary.csv"),
        prov,
        &["assignment", "n_models", "mean_accuracy", "wins_vs_uniform", "ties", "losses"],
        &summary,
    )?;
    write_json(&out.join("quant_plans.json"), prov, &serde_json::json!({ "plans": plans }))
}

pub fn write_robust(out: &Path, prov: &Provenance, config: &RunConfig, curves: &[RobustCurve]) -> Result<()> {
    for c in curves {
        let rows: Vec<Vec<String>> = c
            .points
            .iter()
            .map(|p| vec![p.n_unchecked.to_string(), fmt6(p.mean_accuracy as f64), fmt6(p.ci95 as f64), p.trials.to_string()])
            .collect();
        write_csv(
            &out.join("robust").join(format!("{}_{}.csv", c.model, c.ordering)),
            prov,
            &["n_unchecked", "mean_acc", "ci95", "trials"],
            &rows,
        )?;
    }
    let rows: Vec<Vec<String>> =
        curves.iter().map(|c| vec![c.model.clone(), c.family.to_string(), c.ordering.clone(), fmt6(c.auc)]).collect();
    write_csv(&out.join("robust_auc.csv"), prov, &["model", "family", "ordering", "auc"], &rows)?;
    let random = random_auc(curves);
    let summary: Vec<Vec<String>> = config
        .robust
        .criteria
        .iter()
        .map(|&crit| {
            let name = source(crit);
            let cell: Vec<&RobustCurve> = curves.iter().filter(|c| c.ordering == name).collect();
            let (w, t, l) = tally(cell.iter().filter_map(|c| random.get(&c.model).map(|&r| (c.auc, r))));
            let n = cell.len().max(1) as f64;
            vec![name, cell.len().to_string(), fmt6(cell.iter().map(|c| c.auc).sum::<f64>() / n), w.to_string(), t.to_string(), l.to_string()]
        })
        .collect();
    write_csv(
        &out.join("robust_summary.csv"),
        prov,
        &["ordering", "n_models", "mean_auc", "wins_vs_random", "ties", "losses"],
        &summary,
    )
}
