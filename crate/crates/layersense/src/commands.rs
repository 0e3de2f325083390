//! The command-line commands: each loads what it needs, runs a pipeline and
//! writes its reports.

use std::fs;
use std::path::Path;

use layersense_core::perturb::audit_diversity;

use crate::applications::{random_auc, run_prune, run_quant, run_robust, write_prune, write_quant, write_robust};
use crate::bench;
use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::generate::{generate, summary};
use crate::report::{ensure_dir, fmt6, write_csv, Provenance};
use crate::store::{self, Dataset, Manifest, FORMAT};

/// Removes the pieces of a previous dataset so stale files cannot linger.
/// Directories that do not hold a dataset are left alone.
fn clear_previous(dir: &Path) -> Result<()> {
    let manifest = dir.join("manifest.json");
    let Ok(bytes) = fs::read(&manifest) else { return Ok(()) };
    let ours = serde_json::from_slice::<serde_json::Value>(&bytes)
        .ok()
        .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(|f| f == FORMAT))
        .unwrap_or(false);
    if !ours {
        return Err(AppError::Config(format!("{} holds a manifest that is not a layersense dataset", dir.display())));
    }
    for sub in ["data", "models", "groundtruth"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(AppError::io(&p))?;
        }
    }
    for file in ["manifest.json", "config.toml", "diversity.json"] {
        let p = dir.join(file);
        if p.exists() {
            fs::remove_file(&p).map_err(AppError::io(&p))?;
        }
    }
    Ok(())
}

pub fn gen(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let ds = generate(config)?;
    clear_previous(&config.dataset)?;
    let manifest = store::save(&ds, &config.dataset)?;
    print!("{}", summary(&ds));
    println!("\ndataset {} version {}", config.dataset.display(), manifest.version);
    Ok(manifest)
}

fn open(config: &RunConfig) -> Result<(Dataset, Provenance)> {
    config.validate()?;
    let (ds, manifest) = store::load(&config.dataset)?;
    let prov = Provenance { config_hash: config.hash(), dataset_version: manifest.version };
    Ok((ds, prov))
}

pub fn bench(config: &RunConfig) -> Result<bench::BenchReport> {
    let (ds, prov) = open(config)?;
    let (report, scores) = bench::run(config, &ds)?;
    ensure_dir(&config.out)?;
    bench::write(&config.out, &prov, &ds, &report, &scores)?;
    println!("reduction  mean_rate");
    for m in &report.reductions {
        println!("{:<10} {}", m.reduction.to_string(), fmt6(m.mean_rate));
    }
    if let Some(b) = &report.best_percentile {
        println!("best percentile {} at {}", b.reduction, fmt6(b.mean_rate));
    }
    Ok(report)
}

pub fn prune(config: &RunConfig) -> Result<()> {
    let (ds, prov) = open(config)?;
    let (rows, plans) = run_prune(config, &ds)?;
    write_prune(&config.out, &prov, config, &rows, &plans)?;
    println!("{} pruning rows written to {}", rows.len(), config.out.display());
    Ok(())
}

pub fn quant(config: &RunConfig) -> Result<()> {
    let (ds, prov) = open(config)?;
    let (rows, plans) = run_quant(config, &ds)?;
    write_quant(&config.out, &prov, config, &rows, &plans)?;
    println!("{} quantization rows written to {}", rows.len(), config.out.display());
    Ok(())
}

pub fn robust(config: &RunConfig) -> Result<()> {
    let (ds, prov) = open(config)?;
    let curves = run_robust(config, &ds)?;
    write_robust(&config.out, &prov, config, &curves)?;
    let random = random_auc(&curves);
    for c in curves.iter().filter(|c| !c.ordering.starts_with("random")) {
        println!("{} {} auc {} random {}", c.model, c.ordering, fmt6(c.auc), fmt6(random.get(&c.model).copied().unwrap_or(f64::NAN)));
    }
    Ok(())
}

/// Verifies checksums, recomputes the diversity audit from the stored
/// records and fails with an integrity error if it disagrees.
pub fn audit(config: &RunConfig) -> Result<()> {
    let (ds, prov) = open(config)?;
    if !ds.records.is_empty() {
        let fresh = audit_diversity(&ds.records)?;
        if fresh != ds.diversity {
            return Err(AppError::Integrity("stored diversity audit does not match the ground-truth records".into()));
        }
    }
    let rows: Vec<Vec<String>> = ds
        .diversity
        .buckets
        .iter()
        .map(|b| {
            vec![
                b.family.to_string(),
                b.noise.as_str().into(),
                b.target.as_str().into(),
                b.n_layers.to_string(),
                b.n_records.to_string(),
                b.n_distinct.to_string(),
                fmt6(b.top_share),
                fmt6(b.entropy),
                fmt6(b.normalized_entropy),
                b.flagged.to_string(),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("diversity.csv"),
        &prov,
        &["family", "noise", "target", "n_layers", "n_records", "n_distinct", "top_share", "entropy", "normalized_entropy", "flagged"],
        &rows,
    )?;
    print!("{}", summary(&ds));
    println!("\ndataset {} verified, version {}", config.dataset.display(), prov.dataset_version);
    Ok(())
}
