//! Pipeline configuration file (TOML) with environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use errslice_core::documents::{RunConfig, ScoringMode, TaskContext};
use errslice_core::prompts::TaskPreset;
use errslice_core::trend::{TrendConfig, TrendMethod};
use errslice_core::TaskKind;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    ChatBackend, EndpointConfig, Gateway, GatewayConfig, MockFixture, MockLlm, MockVlm, OpenAiBackend, RetryPolicy,
};
use crate::generation::GenerationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{0}")]
    Gateway(#[from] crate::gateway::GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<TaskPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub target_class: String,
    pub task_kind: TaskKind,
}

impl TaskSection {
    /// Explicit description, else the preset rendered for the target class.
    pub fn context(&self) -> Result<TaskContext, ConfigError> {
        let description = match (&self.description, self.preset) {
            (Some(d), _) => d.clone(),
            (None, Some(p)) => p.render(&self.target_class),
            (None, None) => String::new(),
        };
        if description.trim().is_empty() {
            return Err(ConfigError::Invalid(
                "task.description is empty and no task.preset is set".into(),
            ));
        }
        Ok(TaskContext {
            task_description: description,
            target_class: self.target_class.clone(),
            task_kind: self.task_kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct VerificationSection {
    pub method: TrendMethod,
    pub k: usize,
    pub scoring: ScoringMode,
    /// Hypotheses verified concurrently.
    pub width: usize,
    pub trend: TrendConfig,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self {
            method: TrendMethod::SlopeTrend,
            k: 10,
            scoring: ScoringMode::Instance,
            width: 4,
            trend: TrendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MockSection {
    /// Replies fixture, relative to the config file.
    pub fixture: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSection,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub verification: VerificationSection,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub llm: EndpointConfig,
    #[serde(default)]
    pub vlm: EndpointConfig,
    /// Judge endpoint; the LLM endpoint when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSection>,
    /// Directory relative paths in this file resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub const ENV_OVERRIDES: &[&str] = &[
    "ERRSLICE_LLM_URL",
    "ERRSLICE_LLM_MODEL",
    "ERRSLICE_LLM_API_KEY",
    "ERRSLICE_VLM_URL",
    "ERRSLICE_VLM_MODEL",
    "ERRSLICE_VLM_API_KEY",
];

impl PipelineConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    /// Reads the file and applies `ERRSLICE_*` environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        config.apply_env(|k| std::env::var(k).ok());
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        let set = |field: &mut String, key: &str| {
            if let Some(v) = var(key) {
                *field = v;
            }
        };
        set(&mut self.llm.url, "ERRSLICE_LLM_URL");
        set(&mut self.llm.model, "ERRSLICE_LLM_MODEL");
        set(&mut self.vlm.url, "ERRSLICE_VLM_URL");
        set(&mut self.vlm.model, "ERRSLICE_VLM_MODEL");
        if let Some(k) = var("ERRSLICE_LLM_API_KEY") {
            self.llm.api_key = Some(k);
        }
        if let Some(k) = var("ERRSLICE_VLM_API_KEY") {
            self.vlm.api_key = Some(k);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.context()?;
        self.verification
            .trend
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("verification.trend: {e}")))?;
        if self.verification.k == 0 {
            return Err(ConfigError::Invalid("verification.k must be at least 1".into()));
        }
        if self.generation.sample_size == 0 {
            return Err(ConfigError::Invalid("generation.sample_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            trend: self.verification.trend.clone(),
            method: self.verification.method,
            k: self.verification.k,
            scoring: self.verification.scoring,
            target_class: self.task.target_class.clone(),
            seed: self.seed,
        }
    }

    fn gateway_config(&self, mock: bool) -> GatewayConfig {
        let mut g = self.gateway.clone();
        g.seed = self.seed;
        if mock {
            g.retry = RetryPolicy::immediate();
        }
        g
    }

    pub fn mock_fixture(&self) -> Result<MockFixture, ConfigError> {
        let section = self
            .mock
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("mock mode requested but [mock] has no fixture".into()))?;
        let path = self.base_dir.join(&section.fixture);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path,
            message: e.to_string(),
        })
    }

    fn resolve_image_root(&self, endpoint: &EndpointConfig) -> EndpointConfig {
        let mut e = endpoint.clone();
        e.image_root = Some(match &e.image_root {
            Some(root) => self.base_dir.join(root),
            None => self.base_dir.clone(),
        });
        e
    }

    /// Gateway for generation and verification. Mock mode uses the replies
    /// fixture; otherwise the configured HTTP endpoints.
    pub fn gateway(&self, mock: bool) -> Result<Gateway, ConfigError> {
        let (llm, vlm): (Arc<dyn ChatBackend>, Arc<dyn ChatBackend>) = if mock {
            let fixture = self.mock_fixture()?;
            (
                Arc::new(MockLlm::new(fixture.llm.clone())),
                Arc::new(MockVlm::from_fixture(&fixture)),
            )
        } else {
            (
                Arc::new(OpenAiBackend::new(self.resolve_image_root(&self.llm)).map_err(|e| ConfigError::Invalid(e.to_string()))?),
                Arc::new(OpenAiBackend::new(self.resolve_image_root(&self.vlm)).map_err(|e| ConfigError::Invalid(e.to_string()))?),
            )
        };
        Ok(Gateway::new(llm, vlm, self.gateway_config(mock))?)
    }

    /// Gateway whose LLM is the judge endpoint.
    pub fn judge_gateway(&self, mock: bool) -> Result<Gateway, ConfigError> {
        match (&self.judge, mock) {
            (Some(judge), false) => {
                let llm: Arc<dyn ChatBackend> =
                    Arc::new(OpenAiBackend::new(judge.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?);
                let vlm: Arc<dyn ChatBackend> =
                    Arc::new(OpenAiBackend::new(self.resolve_image_root(&self.vlm)).map_err(|e| ConfigError::Invalid(e.to_string()))?);
                Ok(Gateway::new(llm, vlm, self.gateway_config(false))?)
            }
            _ => self.gateway(mock),
        }
    }
}
