#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layersense::core::criteria::Criterion;
use layersense::core::modelzoo::Family;
use layersense::core::perturb::{NoiseKind, PerturbTarget};
use layersense::RunConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub fn tiny_config(dataset: &Path, out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 5;
    c.dataset = dataset.to_path_buf();
    c.out = out.to_path_buf();
    c.data.train = 256;
    c.data.test = 128;
    c.models.families = vec![Family::Vanilla];
    c.models.count = 2;
    c.train.epochs = 3;
    c.truth.noises = vec![NoiseKind::Pepper];
    c.truth.targets = vec![PerturbTarget::Weights];
    c.truth.grids.proportions = vec![0.2, 0.8];
    c.truth.grids.n_draws = 2;
    c.criteria.list = vec![Criterion::Weights, Criterion::Grad, Criterion::WeightTimesGrad, Criterion::Idgi];
    c.criteria.calib_subset = Some(16);
    c.criteria.params.idgi_steps = 4;
    c.criteria.params.ig_steps = 4;
    c.criteria.params.n_noise = 2;
    c.criteria.params.hsic_masks = 16;
    c.robust.n_trials = 4;
    c.robust.random_orders = 2;
    c
}

pub fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, config.to_toml()).unwrap();
    p
}

pub fn cli(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layersense"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn status(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Data rows of a report CSV, skipping the provenance line and the header.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

/// Relative path and contents of every file under `root`, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
