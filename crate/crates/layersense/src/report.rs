//! Report writers. CSV files start with a `#` provenance line carrying the
//! config hash and dataset version; floats use 6 significant digits.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_version: String,
}

/// `printf("%.6g")`.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))
}

pub fn write_csv(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut buf = format!("# config_hash={} dataset_version={}\n", prov.config_hash, prov.dataset_version).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(AppError::io(path))?;
    }
    fs::write(path, buf).map_err(AppError::io(path))
}

/// Writes `{provenance fields, ...value}` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Wrapped<'a, T> {
        #[serde(flatten)]
        provenance: &'a Provenance,
        #[serde(flatten)]
        body: &'a T,
    }
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(&Wrapped { provenance: prov, body: value })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(AppError::io(path))
}
