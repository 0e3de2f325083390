//! Run configuration: a versioned TOML document whose values can be
//! overridden from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layersense_core::apps::{FaultTarget, PruneMode};
use layersense_core::criteria::{Criterion, CriterionConfig, MIN_MASKS};
use layersense_core::modelzoo::{Family, SplitSizes, TrainConfig};
use layersense_core::perturb::{Grids, NoiseKind, PerturbTarget};
use layersense_core::reduce::ReduceMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Worker threads. Results do not depend on it.
    pub jobs: usize,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub train: TrainConfig,
    pub truth: TruthConfig,
    pub criteria: CriteriaConfig,
    /// Per-family overrides of model counts and measurement fidelity.
    #[serde(default)]
    pub fidelity: BTreeMap<Family, FamilyFidelity>,
    pub prune: PruneConfig,
    pub quant: QuantConfig,
    pub robust: RobustConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub noise_std: f32,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub families: Vec<Family>,
    /// Models per family unless a fidelity override says otherwise.
    pub count: usize,
    /// Attempts per model slot when training diverges.
    pub max_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub noises: Vec<NoiseKind>,
    pub targets: Vec<PerturbTarget>,
    /// Leading test points used for measurement; all when absent.
    pub test_subset: Option<usize>,
    pub grids: Grids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriteriaConfig {
    pub list: Vec<Criterion>,
    pub reductions: Vec<ReduceMethod>,
    /// Percentiles swept for the best-percentile column.
    pub percentiles: Vec<f32>,
    /// Leading calibration points used; all when absent.
    pub calib_subset: Option<usize>,
    pub params: CriterionConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyFidelity {
    pub count: Option<usize>,
    pub n_draws: Option<usize>,
    pub test_subset: Option<usize>,
    pub calib_subset: Option<usize>,
    pub ig_steps: Option<usize>,
    pub idgi_steps: Option<usize>,
    pub gig_steps: Option<usize>,
    pub n_noise: Option<usize>,
    pub hsic_masks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub families: Vec<Family>,
    /// First models per family in id order; all when absent.
    pub max_models: Option<usize>,
    /// A single model id; overrides the two fields above.
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub gamma: f64,
    pub mode: PruneMode,
    pub inter: Vec<Criterion>,
    pub intra: Vec<Criterion>,
    /// Layer reduction for the inter-layer budget.
    pub reduction: ReduceMethod,
    /// Row reduction for neuron scores.
    pub intra_reduction: ReduceMethod,
    pub select: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub target_bits: u32,
    pub activation_bits: Option<u32>,
    pub criteria: Vec<Criterion>,
    pub reduction: ReduceMethod,
    pub select: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustConfig {
    pub flip_rate: f64,
    pub target: FaultTarget,
    pub n_trials: usize,
    pub criteria: Vec<Criterion>,
    pub reduction: ReduceMethod,
    /// Random layer orders averaged into the `random` baseline.
    pub random_orders: usize,
    pub select: Selection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vanilla = Selection { families: vec![Family::Vanilla], max_models: None, model: None };
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            jobs: 1,
            dataset: PathBuf::from("dataset"),
            out: PathBuf::from("reports"),
            data: DataConfig { noise_std: 0.1, train: SplitSizes::default().train, test: SplitSizes::default().test },
            models: ModelsConfig { families: Family::ALL.to_vec(), count: 10, max_attempts: 3 },
            train: TrainConfig::default(),
            truth: TruthConfig {
                noises: NoiseKind::ALL.to_vec(),
                targets: PerturbTarget::ALL.to_vec(),
                test_subset: None,
                grids: Grids::default(),
            },
            criteria: CriteriaConfig {
                list: Criterion::ALL.to_vec(),
                reductions: ReduceMethod::STANDARD.to_vec(),
                percentiles: ReduceMethod::PERCENTILES.to_vec(),
                calib_subset: None,
                params: CriterionConfig::default(),
            },
            fidelity: BTreeMap::new(),
            prune: PruneConfig {
                gamma: 0.2,
                mode: PruneMode::Structured,
                inter: vec![Criterion::Grad],
                intra: vec![Criterion::Idgi],
                reduction: ReduceMethod::Linf,
                intra_reduction: ReduceMethod::L1,
                select: vanilla.clone(),
            },
            quant: QuantConfig {
                target_bits: 4,
                activation_bits: Some(8),
                criteria: vec![Criterion::Grad],
                reduction: ReduceMethod::Linf,
                select: vanilla.clone(),
            },
            robust: RobustConfig {
                flip_rate: 1.0,
                target: FaultTarget::Both,
                n_trials: 100,
                criteria: vec![Criterion::WeightTimesGrad],
                reduction: ReduceMethod::Linf,
                random_orders: 4,
                select: vanilla,
            },
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
}

/// Settings of one family after applying its fidelity override.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilySettings {
    pub count: usize,
    pub grids: Grids,
    pub test_subset: Option<usize>,
    pub calib_subset: Option<usize>,
    pub params: CriterionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(d) = &o.dataset {
            self.dataset = d.clone();
        }
        if let Some(d) = &o.out {
            self.out = d.clone();
        }
        if let Some(m) = &o.model {
            for sel in [&mut self.prune.select, &mut self.quant.select, &mut self.robust.select] {
                sel.model = Some(m.clone());
            }
        }
    }

    /// The configuration with the fields that cannot change results (paths
    /// and worker count) reset to their defaults.
    pub fn portable(&self) -> Self {
        let d = Self::default();
        Self { jobs: d.jobs, dataset: d.dataset, out: d.out, ..self.clone() }
    }

    /// SHA-256 of the portable configuration.
    pub fn hash(&self) -> String {
        hex_digest(self.portable().to_toml().as_bytes())
    }

    pub fn family(&self, family: Family) -> FamilySettings {
        let f = self.fidelity.get(&family).cloned().unwrap_or_default();
        let mut grids = self.truth.grids.clone();
        if let Some(n) = f.n_draws {
            grids.n_draws = n;
        }
        let mut params = self.criteria.params;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut params.ig_steps, f.ig_steps);
        set(&mut params.idgi_steps, f.idgi_steps);
        set(&mut params.gig_steps, f.gig_steps);
        set(&mut params.n_noise, f.n_noise);
        set(&mut params.hsic_masks, f.hsic_masks);
        FamilySettings {
            count: f.count.unwrap_or(self.models.count),
            grids,
            test_subset: f.test_subset.or(self.truth.test_subset),
            calib_subset: f.calib_subset.or(self.criteria.calib_subset),
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AppError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if !(self.data.noise_std >= 0.0) || self.data.train == 0 || self.data.test == 0 {
            return bad("data: noise_std must be non-negative and splits non-empty".into());
        }
        if self.models.families.is_empty() || self.models.max_attempts == 0 {
            return bad("models: need at least one family and one attempt".into());
        }
        if self.train.batch_size == 0 {
            return bad("train: batch_size must be positive".into());
        }
        if self.truth.noises.is_empty() || self.truth.targets.is_empty() {
            return bad("truth: noises and targets must be non-empty".into());
        }
        if self.criteria.list.is_empty() || self.criteria.reductions.is_empty() {
            return bad("criteria: list and reductions must be non-empty".into());
        }
        if self.criteria.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return bad("criteria: percentiles must lie in [0, 100]".into());
        }
        for family in &self.models.families {
            let s = self.family(*family);
            let g = &s.grids;
            if g.n_draws == 0 || g.proportions.is_empty() || g.sigma_fractions.is_empty() {
                return bad(format!("{family}: ground-truth grids and draws must be non-empty"));
            }
            if g.proportions.iter().chain([&g.dirac_proportion]).any(|p| !(*p > 0.0 && *p <= 1.0)) {
                return bad(format!("{family}: proportions must lie in (0, 1]"));
            }
            if g.sigma_fractions.iter().any(|s| !(*s > 0.0)) || !(g.tie_epsilon >= 0.0) {
                return bad(format!("{family}: sigma fractions must be positive and tie epsilon non-negative"));
            }
            if s.test_subset == Some(0) || s.calib_subset == Some(0) {
                return bad(format!("{family}: subsets must be non-empty"));
            }
            let p = &s.params;
            if p.ig_steps == 0 || p.idgi_steps == 0 || p.gig_steps == 0 {
                return bad(format!("{family}: path criteria need at least one step"));
            }
            if !(p.gig_shrink > 0.0 && p.gig_shrink <= 1.0) || !(p.sigma_rel >= 0.0) {
                return bad(format!("{family}: gig_shrink must lie in (0, 1] and sigma_rel be non-negative"));
            }
            if p.n_noise < 2 {
                return bad(format!("{family}: n_noise must be at least 2"));
            }
            if p.hsic_masks < MIN_MASKS {
                return bad(format!("{family}: hsic_masks must be at least {MIN_MASKS}"));
            }
        }
        if !(0.0..1.0).contains(&self.prune.gamma) {
            return bad(format!("prune: gamma {} outside [0, 1)", self.prune.gamma));
        }
        if self.prune.inter.is_empty() || self.prune.intra.is_empty() {
            return bad("prune: inter and intra lists must be non-empty".into());
        }
        if !(3..=7).contains(&self.quant.target_bits) {
            return bad(format!("quant: target_bits {} outside [3, 7]", self.quant.target_bits));
        }
        if let Some(b) = self.quant.activation_bits {
            if !(2..=16).contains(&b) {
                return bad(format!("quant: activation_bits {b} outside [2, 16]"));
            }
        }
        if !(self.robust.flip_rate >= 0.0 && self.robust.flip_rate.is_finite()) || self.robust.n_trials == 0 {
            return bad("robust: flip_rate must be finite and non-negative, n_trials positive".into());
        }
        for sel in [&self.prune.select, &self.quant.select, &self.robust.select] {
            if sel.families.is_empty() && sel.model.is_none() {
                return bad("application selection names no family or model".into());
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
