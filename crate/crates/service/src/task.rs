//! Task records and the payload each kind carries.

use chrono::{DateTime, Utc};
use errslice_core::documents::{RunConfig, RunStatus, ScoringMode, TaskContext};
use errslice_core::trend::TrendMethod;
use errslice_core::Hypothesis;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    HypothesisGeneration,
    Verification,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Task {
    pub schema_version: u32,
    pub task_id: String,
    /// Creation order; ids are derived from it.
    pub seq: u64,
    pub kind: TaskKind,
    pub status: RunStatus,
    pub progress: Progress,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Store-relative path of the payload document.
    pub payload_ref: String,
    /// Store-relative path of the results document, once terminal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results_ref: Option<String>,
    #[serde(default)]
    pub error_ledger: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// Body of `POST /tasks`.
#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub schema_version: u32,
    pub kind: TaskKind,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub dataset_id: String,
    /// Replaces the configured task description.
    #[serde(default)]
    pub task_description: Option<String>,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct VerificationRequest {
    pub dataset_id: String,
    pub hypothesis_ids: Vec<String>,
    /// Hypotheses not in the catalog, referenced from `hypothesis_ids`.
    #[serde(default)]
    pub hypotheses: Vec<Hypothesis>,
    #[serde(default)]
    pub method: Option<TrendMethod>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub scoring: Option<ScoringMode>,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRequest {
    /// A verification task.
    pub run_task_id: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub judge: bool,
}

/// Validated payload as stored: everything the worker needs, frozen at
/// submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Job {
    HypothesisGeneration {
        dataset_id: String,
        context: TaskContext,
    },
    Verification {
        dataset_id: String,
        config: RunConfig,
        hypotheses: Vec<Hypothesis>,
    },
    Evaluation {
        dataset_id: String,
        run_task_id: String,
        k: usize,
        judge: bool,
    },
}

impl Job {
    pub fn kind(&self) -> TaskKind {
        match self {
            Job::HypothesisGeneration { .. } => TaskKind::HypothesisGeneration,
            Job::Verification { .. } => TaskKind::Verification,
            Job::Evaluation { .. } => TaskKind::Evaluation,
        }
    }

    pub fn total(&self) -> usize {
        match self {
            Job::Verification { hypotheses, .. } => hypotheses.len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StoredPayload {
    pub schema_version: u32,
    #[serde(flatten)]
    pub job: Job,
}
