//! Deterministic CSV/JSON artifacts stamped with the config hash and seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::CliError;

/// Identifies the inputs an artifact was produced from.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# config_sha256={} seed={}", self.hash, self.seed)
    }
}

/// Shortest round-trip form, independent of thread count and platform.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::File::create(path).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

pub fn write_csv(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&prov.comment());
    text.push('\n');
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON with `config_sha256` and `seed` merged into the top object.
pub fn write_json(path: &Path, prov: &Provenance, body: Value) -> Result<(), CliError> {
    let text = stamped_json(prov, body);
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

pub fn stamped_json(prov: &Provenance, body: Value) -> String {
    let mut map = serde_json::Map::new();
    map.insert("config_sha256".into(), Value::String(prov.hash.clone()));
    map.insert("seed".into(), Value::from(prov.seed));
    match body {
        Value::Object(inner) => map.extend(inner),
        other => {
            map.insert("result".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("JSON values serialize");
    text.push('\n');
    text
}

/// Hash of command-line inputs for commands that take no config file.
pub fn sha256_args(parts: &[&str]) -> String {
    crate::config::sha256_hex(parts.join("\u{1f}").as_bytes())
}

pub fn sha256_bytes(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}
