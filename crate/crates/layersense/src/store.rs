//! On-disk dataset layout.
//!
//! ```text
//! manifest.json                      format, version, checksums of every other file
//! config.toml                        generation config
//! data/{train,test,calibration}.bin  u64 count, f32 LE points, u8 labels
//! models/<id>/model.json             spec, accuracies, layer table, parameter index
//! models/<id>/<param>.bin            f32 LE values
//! groundtruth/<id>_<noise>_<target>.json
//! diversity.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use layersense_core::modelzoo::{Family, ModelSpec, MoonsDataset, Split, TrainConfig, TrainedModel};
use layersense_core::perturb::{DiversityReport, Grids, GroundTruthRecord};
use layersense_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, DataConfig, RunConfig};
use crate::error::{AppError, Result};

pub const FORMAT: &str = "layersense-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub id: String,
    pub model: TrainedModel,
}

/// A generated benchmark: the data, the trained models and their measured
/// layer rankings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: RunConfig,
    pub data: MoonsDataset,
    pub models: Vec<ModelEntry>,
    pub records: Vec<GroundTruthRecord>,
    pub diversity: DiversityReport,
}

impl Dataset {
    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn records_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a GroundTruthRecord> + 'a {
        self.records.iter().filter(move |r| r.model_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub family: Family,
    pub n_layers: usize,
    pub train_accuracy: f32,
    pub test_accuracy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    /// Format version plus a prefix of the content hash.
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub grids: Grids,
    pub models: Vec<ModelSummary>,
    /// Relative path to SHA-256 of every file besides the manifest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamFile {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerFile {
    name: String,
    weight_file: String,
    shape: Vec<usize>,
    /// Graph node holding the layer's activations.
    activation_site: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    id: String,
    spec: ModelSpec,
    train_accuracy: f32,
    test_accuracy: f32,
    layers: Vec<LayerFile>,
    params: Vec<ParamFile>,
}

fn dataset_version(files: &BTreeMap<String, String>) -> String {
    let listing: String = files.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
    format!("{FORMAT_VERSION}-{}", &hex_digest(listing.as_bytes())[..16])
}

pub fn record_file(r: &GroundTruthRecord) -> String {
    format!("groundtruth/{}_{}_{}.json", r.model_id, r.noise.as_str(), r.target.as_str())
}

struct Sink<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl Sink<'_> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(AppError::io(parent))?;
        }
        fs::write(&path, bytes).map_err(AppError::io(&path))?;
        self.files.insert(rel.to_string(), hex_digest(bytes));
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(rel, &bytes)
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(bytes: &[u8], what: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(AppError::Integrity(format!("{what}: {} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn split_bytes(split: &Split) -> Vec<u8> {
    let mut out = (split.len() as u64).to_le_bytes().to_vec();
    out.extend(f32_bytes(split.inputs.data()));
    out.extend(split.labels.iter().map(|&l| l as u8));
    out
}

fn split_from(bytes: &[u8], what: &str) -> Result<Split> {
    let corrupt = || AppError::Integrity(format!("{what}: truncated or oversized split"));
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(corrupt)?.try_into().expect("8 bytes")) as usize;
    if bytes.len() != 8 + n * 9 {
        return Err(corrupt());
    }
    let inputs = f32_values(&bytes[8..8 + 8 * n], what)?;
    let labels = bytes[8 + 8 * n..].iter().map(|&b| b as usize).collect();
    Ok(Split { inputs: Tensor::matrix(n, 2, inputs)?, labels })
}

/// Writes `ds` under `dir`, manifest last.
pub fn save(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    let mut sink = Sink { root: dir, files: BTreeMap::new() };
    sink.put("config.toml", ds.config.portable().to_toml().as_bytes())?;
    for (name, split) in [("train", &ds.data.train), ("test", &ds.data.test), ("calibration", &ds.data.calibration)] {
        sink.put(&format!("data/{name}.bin"), &split_bytes(split))?;
    }
    for entry in &ds.models {
        let mut params = Vec::new();
        for (i, (name, t)) in entry.model.named_params().into_iter().enumerate() {
            let file = format!("{i:02}_{name}.bin");
            sink.put(&format!("models/{}/{file}", entry.id), &f32_bytes(t.data()))?;
            params.push(ParamFile { name, shape: t.shape().to_vec(), file });
        }
        let graph = &entry.model.graph;
        let layers = entry
            .model
            .layers
            .iter()
            .map(|h| {
                let pname = graph.param_name(h.weight);
                LayerFile {
                    name: h.name.clone(),
                    weight_file: params.iter().find(|p| p.name == pname).map(|p| p.file.clone()).unwrap_or_default(),
                    shape: graph.param(h.weight).shape().to_vec(),
                    activation_site: h.site.0,
                }
            })
            .collect();
        let mf = ModelFile {
            layers,
            id: entry.id.clone(),
            spec: entry.model.spec.clone(),
            train_accuracy: entry.model.train_accuracy,
            test_accuracy: entry.model.test_accuracy,
            params,
        };
        sink.put_json(&format!("models/{}/model.json", entry.id), &mf)?;
    }
    for r in &ds.records {
        sink.put_json(&record_file(r), r)?;
    }
    sink.put_json("diversity.json", &ds.diversity)?;
    let files = sink.files;
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        version: dataset_version(&files),
        config_hash: ds.config.hash(),
        seed: ds.config.seed,
        data: ds.config.data.clone(),
        train: ds.config.train,
        grids: ds.config.truth.grids.clone(),
        models: ds
            .models
            .iter()
            .map(|m| ModelSummary {
                id: m.id.clone(),
                family: m.model.spec.family,
                n_layers: m.model.num_layers(),
                train_accuracy: m.model.train_accuracy,
                test_accuracy: m.model.test_accuracy,
            })
            .collect(),
        files,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    let path = dir.join("manifest.json");
    fs::write(&path, bytes).map_err(AppError::io(&path))?;
    Ok(manifest)
}

/// Reads and checks the manifest: format, version and every checksum.
pub fn verify(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| AppError::Integrity(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| AppError::Integrity(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
        return Err(AppError::Integrity(format!(
            "unsupported dataset format {} v{}",
            manifest.format, manifest.format_version
        )));
    }
    for (rel, sum) in &manifest.files {
        let p = dir.join(rel);
        let bytes = fs::read(&p).map_err(|e| AppError::Integrity(format!("{rel}: {e}")))?;
        if &hex_digest(&bytes) != sum {
            return Err(AppError::Integrity(format!("{rel}: checksum mismatch")));
        }
    }
    if dataset_version(&manifest.files) != manifest.version {
        return Err(AppError::Integrity("dataset version does not match its file listing".into()));
    }
    Ok(manifest)
}

fn read_checked(dir: &Path, manifest: &Manifest, rel: &str) -> Result<Vec<u8>> {
    if !manifest.files.contains_key(rel) {
        return Err(AppError::Integrity(format!("{rel} is not listed in the manifest")));
    }
    fs::read(dir.join(rel)).map_err(|e| AppError::Integrity(format!("{rel}: {e}")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], rel: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| AppError::Integrity(format!("{rel}: {e}")))
}

/// Loads a dataset after verifying its checksums.
pub fn load(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = verify(dir)?;
    let text = String::from_utf8(read_checked(dir, &manifest, "config.toml")?)
        .map_err(|e| AppError::Integrity(format!("config.toml: {e}")))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| AppError::Integrity(format!("config.toml: {e}")))?;
    let split = |name: &str| -> Result<Split> {
        let rel = format!("data/{name}.bin");
        split_from(&read_checked(dir, &manifest, &rel)?, &rel)
    };
    let data = MoonsDataset {
        train: split("train")?,
        test: split("test")?,
        calibration: split("calibration")?,
        noise_std: config.data.noise_std,
        seed: config.seed,
    };
    let mut models = Vec::with_capacity(manifest.models.len());
    for summary in &manifest.models {
        let rel = format!("models/{}/model.json", summary.id);
        let mf: ModelFile = parse_json(&read_checked(dir, &manifest, &rel)?, &rel)?;
        let mut weights = Vec::with_capacity(mf.params.len());
        for p in &mf.params {
            let rel = format!("models/{}/{}", summary.id, p.file);
            let values = f32_values(&read_checked(dir, &manifest, &rel)?, &rel)?;
            let t = Tensor::new(p.shape.clone(), values).map_err(|e| AppError::Integrity(format!("{rel}: {e}")))?;
            weights.push((p.name.clone(), t));
        }
        let model = TrainedModel::from_weights(mf.spec, &weights, mf.train_accuracy, mf.test_accuracy)
            .map_err(|e| AppError::Integrity(format!("{rel}: {e}")))?;
        let names: Vec<&str> = model.layers.iter().map(|h| h.name.as_str()).collect();
        if names != mf.layers.iter().map(|l| l.name.as_str()).collect::<Vec<_>>() {
            return Err(AppError::Integrity(format!("{rel}: layer table does not match the architecture")));
        }
        models.push(ModelEntry { id: mf.id, model });
    }
    let mut records = Vec::new();
    for rel in manifest.files.keys().filter(|k| k.starts_with("groundtruth/")) {
        records.push(parse_json::<GroundTruthRecord>(&read_checked(dir, &manifest, rel)?, rel)?);
    }
    // Files are listed alphabetically; restore generation order.
    let order: BTreeMap<&str, usize> = manifest.models.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
    records.sort_by_key(|r| (order.get(r.model_id.as_str()).copied(), r.noise, r.target));
    let diversity = parse_json(&read_checked(dir, &manifest, "diversity.json")?, "diversity.json")?;
    Ok((Dataset { config, data, models, records, diversity }, manifest))
}
