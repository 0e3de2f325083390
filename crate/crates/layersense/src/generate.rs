//! Dataset generation: sample architectures, train them, measure layer
//! rankings and audit their diversity.

use std::fmt::Write as _;

use layersense_core::modelzoo::{build, sample_spec, train, Family, MoonsDataset, Split, SplitSizes};
use layersense_core::perturb::{audit_diversity, ground_truth, DiversityReport, GroundTruthRecord};
use layersense_core::rng::{derive_seed, rng_from, tag};
use layersense_core::Error as CoreError;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::store::{Dataset, ModelEntry};

pub fn model_id(family: Family, index: usize) -> String {
    format!("{}-{index:04}", family.as_str())
}

pub(crate) fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

/// The first `n` points of `split`, or all of it.
pub(crate) fn subset(split: &Split, n: Option<usize>) -> Split {
    match n {
        Some(n) if n < split.len() => split.head(n),
        _ => split.clone(),
    }
}

/// Generates the whole dataset in memory. Jobs run on `config.jobs`
/// threads; results are collected in job order.
pub fn generate(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    let sizes = SplitSizes { train: config.data.train, test: config.data.test };
    let data = MoonsDataset::generate(sizes, config.data.noise_std, derive_seed(config.seed, &[tag("data")]))?;
    let mut families = config.models.families.clone();
    families.sort();
    families.dedup();
    let jobs: Vec<(Family, usize)> =
        families.iter().flat_map(|&f| (0..config.family(f).count).map(move |i| (f, i))).collect();
    log::info!("generating {} models", jobs.len());
    let results: Vec<Result<(ModelEntry, Vec<GroundTruthRecord>)>> =
        pool(config.jobs)?.install(|| jobs.par_iter().map(|&(f, i)| generate_one(config, &data, f, i)).collect());
    let mut models = Vec::with_capacity(jobs.len());
    let mut records = Vec::new();
    for r in results {
        let (m, recs) = r?;
        models.push(m);
        records.extend(recs);
    }
    let diversity = if records.is_empty() { DiversityReport { buckets: Vec::new() } } else { audit_diversity(&records)? };
    Ok(Dataset { config: config.clone(), data, models, records, diversity })
}

fn generate_one(
    config: &RunConfig,
    data: &MoonsDataset,
    family: Family,
    index: usize,
) -> Result<(ModelEntry, Vec<GroundTruthRecord>)> {
    let id = model_id(family, index);
    let settings = config.family(family);
    let mut attempt = 0;
    let model = loop {
        let mut rng = rng_from(config.seed, &[tag("spec"), tag(family.as_str()), index as u64, attempt as u64]);
        let spec = sample_spec(family, &mut rng);
        match train(build(&spec)?, data, &config.train) {
            Ok(m) => break m,
            Err(e @ CoreError::Diverged { .. }) if attempt + 1 < config.models.max_attempts => {
                log::warn!("{id}: {e}; resampling");
                attempt += 1;
            }
            Err(e) => return Err(e.into()),
        }
    };
    let test = subset(&data.test, settings.test_subset);
    let mut noises = config.truth.noises.clone();
    noises.sort();
    noises.dedup();
    let mut targets = config.truth.targets.clone();
    targets.sort();
    targets.dedup();
    let seed = derive_seed(config.seed, &[tag("truth"), tag(&id)]);
    let mut records = Vec::with_capacity(noises.len() * targets.len());
    for &noise in &noises {
        for &target in &targets {
            records.push(ground_truth(&model, &id, noise, target, &settings.grids, &test, seed)?);
        }
    }
    log::info!("{id}: {} layers, test accuracy {:.3}", model.num_layers(), model.test_accuracy);
    Ok((ModelEntry { id, model }, records))
}

/// Human-readable generation summary: models and accuracy per family and
/// the diversity of every ranking bucket.
pub fn summary(ds: &Dataset) -> String {
    let mut out = String::new();
    let mut families: Vec<Family> = ds.models.iter().map(|m| m.model.spec.family).collect();
    families.dedup();
    let _ = writeln!(out, "family     models  mean_test_acc  share_acc>=0.97");
    for f in families {
        let accs: Vec<f32> =
            ds.models.iter().filter(|m| m.model.spec.family == f).map(|m| m.model.test_accuracy).collect();
        let mean = accs.iter().map(|&a| a as f64).sum::<f64>() / accs.len() as f64;
        let good = accs.iter().filter(|&&a| a >= 0.97).count() as f64 / accs.len() as f64;
        let _ = writeln!(out, "{:<10} {:>6}  {:>13.4}  {:>15.3}", f.as_str(), accs.len(), mean, good);
    }
    let _ = writeln!(out, "\nfamily     noise     target       layers  records  distinct  top_share  norm_entropy  flagged");
    for b in &ds.diversity.buckets {
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:<12} {:>6}  {:>7}  {:>8}  {:>9.3}  {:>12.3}  {}",
            b.family.as_str(),
            b.noise.as_str(),
            b.target.as_str(),
            b.n_layers,
            b.n_records,
            b.n_distinct,
            b.top_share,
            b.normalized_entropy,
            b.flagged
        );
    }
    out
}
