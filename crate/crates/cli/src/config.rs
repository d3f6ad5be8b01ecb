//! TOML configuration: one file supplies defaults for any subcommand flag;
//! flags always win.

use std::path::{Path, PathBuf};

use anyhow::Context;
use crisisml_core::infer::EndpointConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub build: BuildSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSection {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub manifest: Option<PathBuf>,
    pub endpoints: Option<PathBuf>,
    pub template: Option<String>,
    pub runs: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub runs: Option<PathBuf>,
    pub n_max: Option<usize>,
    pub out: Option<PathBuf>,
    pub template: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub runs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub template: Option<String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// The `[[endpoint]]` list consumed by `infer`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsFile {
    pub endpoint: Vec<EndpointConfig>,
}

impl EndpointsFile {
    pub fn load(path: &Path) -> anyhow::Result<Vec<EndpointConfig>> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading endpoints {}", path.display()))?;
        let file: EndpointsFile =
            toml::from_str(&raw).with_context(|| format!("parsing endpoints {}", path.display()))?;
        if file.endpoint.is_empty() {
            anyhow::bail!("{}: no [[endpoint]] entries", path.display());
        }
        for endpoint in &file.endpoint {
            endpoint.validate()?;
        }
        Ok(file.endpoint)
    }
}
