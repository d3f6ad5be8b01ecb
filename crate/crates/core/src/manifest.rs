//! Build and experiment manifests: enough provenance to reproduce any
//! artifact byte-for-byte from its inputs.
//!
//! Timestamps honor `SOURCE_DATE_EPOCH` so repeated invocations with fixed
//! seeds produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::EndpointConfig;
use crate::templates::TemplateId;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seconds since the epoch, overridable via `SOURCE_DATE_EPOCH` for
/// reproducible outputs.
pub fn created_at_unix() -> u64 {
    if let Ok(raw) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(value) = raw.parse() {
            return value;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Sidecar written by dataset construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildManifest {
    pub corpus_path: String,
    pub corpus_digest: String,
    pub record_count: usize,
    pub instance_count: usize,
    /// Set when the corpus was split before instance construction.
    pub seed: Option<u64>,
    pub train_fraction: Option<f64>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
    pub template_digests: BTreeMap<String, String>,
    pub instances_path: String,
    /// Records to run inference over: the test partition when split,
    /// otherwise the whole corpus.
    pub inference_records_path: String,
    pub created_at_unix: u64,
    pub artifact_version: String,
}

/// Sidecar written next to an experiment's runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub endpoints: Vec<EndpointConfig>,
    pub template: TemplateId,
    pub template_digest: String,
    pub records_path: String,
    pub records_digest: String,
    pub created_at_unix: u64,
    pub artifact_version: String,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let pretty = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid_file(path, e.to_string()))?;
    std::fs::write(path, pretty + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::invalid_file(path, e.to_string()))
}
