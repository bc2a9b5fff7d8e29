//! Service configuration file with environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Task store directory.
    #[serde(default = "default_store")]
    pub store: PathBuf,
    /// Tasks executed at once. Zero accepts tasks without running them.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Pipeline config holding model endpoints and run defaults.
    pub pipeline: PathBuf,
    /// Serve model calls from the pipeline's mock fixture.
    #[serde(default)]
    pub mock: bool,
    /// Dataset id to manifest path.
    #[serde(default)]
    pub datasets: BTreeMap<String, PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_store() -> PathBuf {
    "store".into()
}

fn default_workers() -> usize {
    1
}

pub const ENV_OVERRIDES: &[&str] = &["ERRSLICE_LISTEN", "ERRSLICE_STORE"];

impl ServiceConfig {
    /// Parses `text`; relative paths resolve against the file's directory.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ServiceConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ServiceConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.store = base.join(&config.store);
        config.pipeline = base.join(&config.pipeline);
        for manifest in config.datasets.values_mut() {
            *manifest = base.join(&*manifest);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServiceConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var("ERRSLICE_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = var("ERRSLICE_STORE") {
            self.store = v.into();
        }
    }
}
