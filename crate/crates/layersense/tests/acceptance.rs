//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The two benchmark datasets are generated once and cached under
//! `LAYERSENSE_ACCEPTANCE_DIR` (default: cargo's target tmp dir), keyed by
//! config hash and re-verified by checksum on every run. Failing criteria
//! are reported, not turned into a non-zero exit status, unless
//! `LAYERSENSE_ACCEPTANCE_STRICT=1` is set.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use layersense::applications::{random_auc, run_prune, run_quant, run_robust, write_prune, write_quant, write_robust, UNIFORM};
use layersense::bench::{self, BenchReport};
use layersense::config::{FamilyFidelity, Selection};
use layersense::core::apps::{inject_and_check, pruning_budget, quantize_tensor, FaultCampaign, MAX_RATE};
use layersense::core::criteria::{crit_ig, idgi_layers, Criterion, CriterionConfig};
use layersense::core::modelzoo::{accuracy, build, sample_spec, Activation, Family, Split};
use layersense::core::perturb::{audit_diversity, NoiseKind, PerturbTarget};
use layersense::core::reduce::ReduceMethod;
use layersense::core::Tensor;
use layersense::generate::generate;
use layersense::report::Provenance;
use layersense::store::{self, Dataset};
use layersense::RunConfig;
use oracle::{cross_entropy64, grad_check, input64, logits64, moons, params64, trained};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

struct Suite {
    passed: usize,
    total: usize,
}

impl Suite {
    fn report(&mut self, id: usize, title: &str, pass: bool, detail: String) {
        self.total += 1;
        self.passed += pass as usize;
        println!("{} [{id}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cache_root() -> PathBuf {
    std::env::var_os("LAYERSENSE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn row(s: &Split, i: usize) -> Split {
    Split { inputs: Tensor::matrix(1, s.inputs.cols(), s.inputs.row(i).to_vec()).unwrap(), labels: vec![s.labels[i]] }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<usize>) {
    let x = Tensor::from_fn(&[n, 2], |_| rng.gen_range(-1.5..2.5));
    (x, (0..n).map(|_| rng.gen_range(0..2)).collect())
}

fn gradients(suite: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, String::new());
    for i in 0..50 {
        let family = Family::ALL[i % 4];
        let spec = sample_spec(family, &mut rng).with_activation(Activation::Gelu);
        let mut graph = build(&spec).unwrap().graph;
        let (x, y) = random_batch(&mut rng, 8);
        let err = grad_check(&mut graph, &x, &y, 4, i as u64);
        if err >= worst.0 {
            worst = (err, format!("{family} #{i}"));
        }
    }
    let t = secs(start);
    suite.report(
        1,
        "gradient correctness",
        worst.0 < 1e-4 && t < 120.0,
        format!("max relative error {:.3e} ({}) over 50 GELU models, all families, {t:.1} s", worst.0, worst.1),
    );
}

/// Per-sample cross-entropy in f64, optionally with layer `l` zeroed.
fn sample_loss(model: &layersense::core::modelzoo::TrainedModel, one: &Split, zero: Option<usize>) -> f64 {
    let mut p = params64(&model.graph);
    if let Some(l) = zero {
        p[model.layers[l].weight.0].data.iter_mut().for_each(|v| *v = 0.0);
    }
    cross_entropy64(&logits64(&model.graph, &p, &input64(&one.inputs)), &one.labels)
}

/// Loss differences below this are not resolved by the f32 forward pass.
const LOSS_FLOOR: f64 = 1e-6;

fn completeness(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ig = CriterionConfig { ig_steps: 64, ..CriterionConfig::default() };
    let idgi = CriterionConfig::default();
    let (mut worst_ig, mut worst_idgi, mut checks, mut over, mut floored) = (0.0f64, 0.0f64, 0usize, 0usize, 0usize);
    for i in 0..20u64 {
        let data = moons(512, 64, 100 + i);
        let spec = sample_spec(Family::Vanilla, &mut rng).with_activation(Activation::Gelu);
        let model = trained(&spec, &data, 3);
        let calib = data.test.head(8);
        for s in 0..calib.len() {
            let one = row(&calib, s);
            let maps = crit_ig(&model, &one, &ig).unwrap();
            let full = sample_loss(&model, &one, None);
            for (l, map) in maps.iter().enumerate() {
                let w = model.graph.param(model.layers[l].weight);
                let attributed: f64 = w.data().iter().zip(map.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                let delta = full - sample_loss(&model, &one, Some(l));
                if delta.abs() < LOSS_FLOOR {
                    floored += 1;
                } else {
                    let r = (attributed - delta).abs() / delta.abs();
                    over += (r >= 0.02) as usize;
                    worst_ig = worst_ig.max(r);
                }
                checks += 1;
            }
        }
        for (_, pairs) in idgi_layers(&model, &calib, &idgi).unwrap() {
            for (total, delta) in pairs {
                worst_idgi = worst_idgi.max((total - delta).abs());
            }
        }
    }
    suite.report(
        2,
        "IG completeness and IDGI telescoping",
        over == 0 && worst_idgi <= 1e-5,
        format!(
            "IG residual >= 2% of |f(w) - f(0)| in {over} of {checks} (net, sample, layer) triples, worst {:.2}% \
             ({floored} triples with |f(w) - f(0)| < {LOSS_FLOOR:e} skipped as below f32 loss resolution); \
             worst IDGI telescoping gap {worst_idgi:.2e}",
            100.0 * worst_ig
        ),
    );
}

fn budgets(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut clamped_cases, mut worst_free) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..12);
        let scores: Vec<f32> = (0..n).map(|_| 10f32.powf(rng.gen_range(-3.0..3.0))).collect();
        let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..5000)).collect();
        let gamma = rng.gen_range(0.01..0.9);
        let plan = pruning_budget(&scores, &sizes, gamma).unwrap();
        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        let pruned: f64 = plan.rates.iter().zip(&sizes).map(|(r, &s)| r * s as f64).sum();
        worst = worst.max((pruned - gamma * total).abs() / (gamma * total));
        if plan.clamped.iter().any(|&c| c) {
            clamped_cases += 1;
            let held: f64 = (0..n).filter(|&l| plan.clamped[l]).map(|l| MAX_RATE * sizes[l] as f64).sum();
            let free: f64 = (0..n).filter(|&l| !plan.clamped[l]).map(|l| plan.rates[l] * sizes[l] as f64).sum();
            let want = gamma * total - held;
            worst_free = worst_free.max((free - want).abs() / want.abs().max(f64::MIN_POSITIVE));
        }
    }
    suite.report(
        6,
        "pruning budget identity",
        worst <= 1e-9 && worst_free <= 1e-9,
        format!("worst relative error {worst:.2e} over 1000 configurations; {clamped_cases} clamped, worst over unclamped layers {worst_free:.2e}"),
    );
}

fn quantizer_bound() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut count) = (0.0f64, 0usize);
    for _ in 0..1000 {
        let scale = 10f32.powf(rng.gen_range(-3.0..2.0));
        let values: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let bits = rng.gen_range(2..=8);
        let (q, delta) = quantize_tensor(&values, bits).unwrap();
        for (&w, &h) in values.iter().zip(&q) {
            worst = worst.max((w as f64 - h as f64).abs() / (delta as f64 / 2.0));
            count += 1;
        }
    }
    (worst <= 1.0, format!("max |w - q| = {worst:.6} x step/2 over {count} weights"))
}

fn base_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.jobs = jobs();
    c.truth.noises = vec![NoiseKind::Pepper];
    c.truth.targets = vec![PerturbTarget::Weights];
    c
}

/// 200 vanilla nets at full default fidelity.
fn vanilla_config() -> RunConfig {
    let mut c = base_config(2024);
    c.models.families = vec![Family::Vanilla];
    c.models.count = 200;
    c.prune.select = Selection { families: vec![Family::Vanilla], max_models: Some(50), model: None };
    c.quant.select = Selection { families: vec![Family::Vanilla], max_models: Some(50), model: None };
    c.robust.select = Selection { families: vec![Family::Vanilla], max_models: Some(30), model: None };
    c
}

/// The residual and transformer families at reduced fidelity.
fn others_config() -> RunConfig {
    let mut c = base_config(2025);
    c.models.families = vec![Family::Skip, Family::SkipSd, Family::Transfo];
    c.models.count = 100;
    let residual = FamilyFidelity { n_draws: Some(16), calib_subset: Some(128), ..FamilyFidelity::default() };
    c.fidelity.insert(Family::Skip, residual.clone());
    c.fidelity.insert(Family::SkipSd, FamilyFidelity { count: Some(80), ..residual });
    c.fidelity.insert(
        Family::Transfo,
        FamilyFidelity {
            count: Some(20),
            n_draws: Some(8),
            test_subset: Some(256),
            calib_subset: Some(64),
            ig_steps: Some(16),
            idgi_steps: Some(16),
            gig_steps: Some(4),
            hsic_masks: Some(64),
            ..FamilyFidelity::default()
        },
    );
    c
}

#[derive(Serialize, Deserialize)]
struct BenchCache {
    dataset_version: String,
    gen_seconds: Option<f64>,
    bench_seconds: f64,
    report: BenchReport,
}

struct Prepared {
    ds: Dataset,
    bench: BenchCache,
    cached: bool,
}

fn prepare(name: &str, config: &RunConfig) -> Prepared {
    let dir = cache_root().join(format!("{name}-{}", &config.hash()[..16]));
    let bench_path = dir.with_extension("bench.json");
    let mut gen_seconds = None;
    let (ds, manifest) = match store::load(&dir) {
        Ok(loaded) => loaded,
        Err(_) => {
            eprintln!("generating {name} dataset in {}", dir.display());
            let start = Instant::now();
            let ds = generate(config).unwrap();
            gen_seconds = Some(secs(start));
            if dir.exists() {
                fs::remove_dir_all(&dir).unwrap();
            }
            store::save(&ds, &dir).unwrap();
            let _ = fs::remove_file(&bench_path);
            store::load(&dir).unwrap()
        }
    };
    let cached: Option<BenchCache> = fs::read(&bench_path).ok().and_then(|b| serde_json::from_slice(&b).ok());
    match cached {
        Some(b) if b.dataset_version == manifest.version && gen_seconds.is_none() => Prepared { ds, bench: b, cached: true },
        _ => {
            eprintln!("benchmarking {name} dataset");
            let start = Instant::now();
            let (report, _) = bench::run(config, &ds).unwrap();
            let bench = BenchCache { dataset_version: manifest.version, gen_seconds, bench_seconds: secs(start), report };
            fs::write(&bench_path, serde_json::to_vec_pretty(&bench).unwrap()).unwrap();
            Prepared { ds, bench, cached: false }
        }
    }
}

fn linf_rate(report: &BenchReport, family: Family, c: Criterion) -> Option<(f64, f64, usize)> {
    report
        .cell(family, NoiseKind::Pepper, PerturbTarget::Weights, c, ReduceMethod::Linf)
        .map(|cell| (cell.rate, cell.random_baseline, cell.n_models))
}

fn benchmark(suite: &mut Suite, vanilla: &Prepared) {
    let (rate, baseline, n) = linf_rate(&vanilla.bench.report, Family::Vanilla, Criterion::Grad).unwrap();
    let runtime = match vanilla.bench.gen_seconds {
        Some(g) => format!("{:.1} min generation + benchmark", (g + vanilla.bench.bench_seconds) / 60.0),
        None => format!("benchmark {:.1} min, generation time not recorded", vanilla.bench.bench_seconds / 60.0),
    };
    suite.report(
        3,
        "benchmark reproduction",
        n >= 200 && rate >= 50.0 && rate >= 5.0 * baseline,
        format!(
            "grad + linf exact-ranking rate {rate:.1}% on {n} vanilla nets, random baseline {baseline:.2}% ({:.1}x); {runtime}{}",
            rate / baseline,
            if vanilla.cached { " (cached)" } else { "" }
        ),
    );
}

fn reductions(suite: &mut Suite, reports: &[&BenchReport], n_models: usize) {
    let pooled = |r: ReduceMethod| -> (usize, usize) {
        reports.iter().filter_map(|rep| rep.reduction(r)).fold((0, 0), |(h, t), m| (h + m.hits, t + m.trials))
    };
    let rate = |r: ReduceMethod| {
        let (h, t) = pooled(r);
        100.0 * h as f64 / t as f64
    };
    let listing: Vec<String> = ReduceMethod::STANDARD.iter().map(|&r| format!("{r} {:.2}", rate(r))).collect();
    let (linf, l1) = (rate(ReduceMethod::Linf), rate(ReduceMethod::L1));
    suite.report(
        4,
        "reduction ordering",
        n_models >= 400 && linf >= l1,
        format!("mean exact-ranking rate over {n_models} pooled models: {}", listing.join(", ")),
    );
}

fn difficulty(suite: &mut Suite, vanilla: &BenchReport, others: &BenchReport) {
    let mut pass = true;
    let mut parts = Vec::new();
    for c in Criterion::ALL {
        let (Some((v, _, _)), Some((t, _, _))) = (linf_rate(vanilla, Family::Vanilla, c), linf_rate(others, Family::Transfo, c)) else {
            pass = false;
            parts.push(format!("{c} missing"));
            continue;
        };
        pass &= t < v;
        parts.push(format!("{c} {t:.1} vs {v:.1}{}", if t < v { "" } else { " (not lower)" }));
    }
    suite.report(5, "architecture-difficulty trend (linf rate, transfo vs vanilla)", pass, parts.join(", "));
}

fn paired(rows: impl Iterator<Item = (String, bool, f64)>) -> (usize, usize, usize, usize) {
    let mut base = std::collections::BTreeMap::new();
    let mut ours = std::collections::BTreeMap::new();
    for (model, is_base, v) in rows {
        let side = if is_base { &mut base } else { &mut ours };
        side.insert(model, v);
    }
    let (mut w, mut t, mut l) = (0, 0, 0);
    for (m, v) in &ours {
        let b = base[m];
        if *v > b {
            w += 1;
        } else if *v == b {
            t += 1;
        } else {
            l += 1;
        }
    }
    (w, t, l, ours.len())
}

fn applications(suite: &mut Suite, config: &RunConfig, ds: &Dataset, want: &dyn Fn(usize) -> bool) {
    if want(7) {
        prune_app(suite, config, ds);
    }
    if want(8) {
        quant_app(suite, config, ds);
    }
    if want(9) {
        robust_app(suite, config, ds);
    }
}

fn prune_app(suite: &mut Suite, config: &RunConfig, ds: &Dataset) {
    let start = Instant::now();
    let (rows, _) = run_prune(config, ds).unwrap();
    let (w, t, l, n) = paired(rows.iter().map(|r| (r.model.clone(), r.inter == UNIFORM, r.accuracy as f64)));
    let share = (w + t) as f64 / n as f64;
    suite.report(
        7,
        "pruning application",
        n >= 50 && share >= 0.6,
        format!(
            "grad/IDGI budgets match or beat uniform on {}/{n} nets ({:.0}%: {w} wins, {t} ties, {l} losses) at gamma 0.2, {:.0} s",
            w + t,
            100.0 * share,
            secs(start)
        ),
    );

}

fn quant_app(suite: &mut Suite, config: &RunConfig, ds: &Dataset) {
    let (bound_ok, bound) = quantizer_bound();
    let (rows, _) = run_quant(config, ds).unwrap();
    let (w, t, l, n) = paired(rows.iter().map(|r| (r.model.clone(), r.assignment == UNIFORM, r.accuracy as f64)));
    let share = (w + t) as f64 / n as f64;
    suite.report(
        8,
        "quantization",
        bound_ok && n >= 50 && share >= 0.6,
        format!(
            "{bound}; thirds match or beat uniform 4-bit on {}/{n} nets ({:.0}%: {w} wins, {t} ties, {l} losses)",
            w + t,
            100.0 * share
        ),
    );

}

fn robust_app(suite: &mut Suite, config: &RunConfig, ds: &Dataset) {
    let curves = run_robust(config, ds).unwrap();
    let random = random_auc(&curves);
    let ranked: Vec<_> = curves.iter().filter(|c| !c.ordering.starts_with("random")).collect();
    let ahead = ranked.iter().filter(|c| c.auc >= random[&c.model]).count();
    let endpoints = ranked.iter().filter(|c| c.points[0].mean_accuracy >= c.points.last().unwrap().mean_accuracy).count();
    let mut exact = 0;
    let mut probes = 0;
    for entry in layersense::applications::select(ds, &config.robust.select).unwrap() {
        let test = &ds.data.test;
        let clean = accuracy(&mut entry.model.graph.detached(), test).unwrap();
        let scores: Vec<f32> = (0..entry.model.num_layers()).map(|l| l as f32).collect();
        for (k, rate) in [0.1, 1.0, 10.0, 1000.0].into_iter().enumerate() {
            let campaign = FaultCampaign { flip_rate: rate, target: config.robust.target, n_trials: 5, seed: k as u64 };
            let acc = inject_and_check(&entry.model, &campaign, &scores, 0, test).unwrap();
            exact += (acc.to_bits() == clean.to_bits()) as usize;
            probes += 1;
        }
    }
    let n = ranked.len();
    let share = ahead as f64 / n as f64;
    suite.report(
        9,
        "robustness",
        exact == probes && endpoints == n && n >= 30 && share >= 0.7,
        format!(
            "n_unchecked=0 bit-exact clean in {exact}/{probes} campaigns; acc(0) >= acc(L) on {endpoints}/{n} nets over {} trials; \
             w_x_grad AUC >= mean random-order AUC on {ahead}/{n} nets ({:.0}%)",
            config.robust.n_trials,
            100.0 * share
        ),
    );
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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

/// Generates a small mixed dataset and every report twice, with different
/// worker counts, and compares the bytes.
fn determinism(suite: &mut Suite) {
    let scratch = tempfile::TempDir::new().unwrap();
    let mut runs = Vec::new();
    for (run, jobs) in [(0, 1), (1, 3)] {
        let root = scratch.path().join(format!("run{run}"));
        let mut c = base_config(77);
        c.jobs = jobs;
        c.dataset = root.join("ds");
        c.out = root.join("out");
        c.models.count = 2;
        c.data.train = 512;
        c.data.test = 256;
        c.train.epochs = 3;
        c.truth.grids.n_draws = 4;
        c.criteria.calib_subset = Some(32);
        c.criteria.params.hsic_masks = 16;
        c.criteria.params.n_noise = 4;
        c.robust.n_trials = 10;
        for s in [&mut c.prune.select, &mut c.quant.select, &mut c.robust.select] {
            s.families = Family::ALL.to_vec();
        }
        let ds = generate(&c).unwrap();
        let manifest = store::save(&ds, &c.dataset).unwrap();
        let (ds, _) = store::load(&c.dataset).unwrap();
        let prov = Provenance { config_hash: c.hash(), dataset_version: manifest.version };
        let (report, scores) = bench::run(&c, &ds).unwrap();
        fs::create_dir_all(&c.out).unwrap();
        bench::write(&c.out, &prov, &ds, &report, &scores).unwrap();
        let (rows, plans) = run_prune(&c, &ds).unwrap();
        write_prune(&c.out, &prov, &c, &rows, &plans).unwrap();
        let (rows, plans) = run_quant(&c, &ds).unwrap();
        write_quant(&c.out, &prov, &c, &rows, &plans).unwrap();
        write_robust(&c.out, &prov, &c, &run_robust(&c, &ds).unwrap()).unwrap();
        assert_eq!(audit_diversity(&ds.records).unwrap(), ds.diversity);
        runs.push((c, ds));
    }
    let same_ds = tree(&runs[0].0.dataset) == tree(&runs[1].0.dataset);
    let reports = tree(&runs[0].0.out);
    let same_reports = reports == tree(&runs[1].0.out);

    // Re-saving a loaded dataset must reproduce it bit for bit.
    let (c, ds) = &runs[0];
    let again = scratch.path().join("resaved");
    store::save(ds, &again).unwrap();
    let round_trip = tree(&c.dataset) == tree(&again);
    let (reloaded, _) = store::load(&again).unwrap();
    let params_exact = ds.models.iter().zip(&reloaded.models).all(|(a, b)| {
        a.model.named_params().iter().zip(b.model.named_params().iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    suite.report(
        10,
        "determinism and round-trip",
        same_ds && same_reports && round_trip && params_exact && !reports.is_empty(),
        format!(
            "dataset of {} models identical across jobs=1/3: {same_ds}; {} report files identical: {same_reports}; \
             save/load round-trip bit-exact: {}",
            ds.models.len(),
            reports.len(),
            round_trip && params_exact
        ),
    );
}

fn main() {
    // `cargo test --test acceptance -- 1 6 10` runs a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    let start = Instant::now();
    let mut suite = Suite { passed: 0, total: 0 };
    if want(1) {
        gradients(&mut suite);
    }
    if want(2) {
        completeness(&mut suite);
    }
    let vanilla_cfg = vanilla_config();
    if [3, 4, 5].into_iter().any(want) {
        let vanilla = prepare("vanilla", &vanilla_cfg);
        if want(3) {
            benchmark(&mut suite, &vanilla);
        }
        if want(4) || want(5) {
            let others = prepare("others", &others_config());
            let n_models = vanilla.ds.models.len() + others.ds.models.len();
            if want(4) {
                reductions(&mut suite, &[&vanilla.bench.report, &others.bench.report], n_models);
            }
            if want(5) {
                difficulty(&mut suite, &vanilla.bench.report, &others.bench.report);
            }
        }
    }
    if want(6) {
        budgets(&mut suite);
    }
    if [7, 8, 9].into_iter().any(want) {
        let vanilla = prepare("vanilla", &vanilla_cfg);
        applications(&mut suite, &vanilla_cfg, &vanilla.ds, &want);
    }
    if want(10) {
        determinism(&mut suite);
    }

    println!("acceptance: {}/{} criteria passed in {:.1} min", suite.passed, suite.total, secs(start) / 60.0);
    let strict = std::env::var("LAYERSENSE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && suite.passed < suite.total {
        std::process::exit(1);
    }
}
