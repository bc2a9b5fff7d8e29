//! Persisted documents exchanged between pipeline stages, the service and
//! the CLI. Every document carries `schema_version`.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CandidateSlice, Hypothesis, TaskKind};
use crate::trend::{TrendConfig, TrendMethod, TrendReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
#[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
pub struct SchemaVersionError {
    pub found: u32,
}

pub fn check_schema_version(found: u32) -> Result<(), SchemaVersionError> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(SchemaVersionError { found })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct TaskContext {
    pub task_description: String,
    pub target_class: String,
    pub task_kind: TaskKind,
}

/// Values inferred for one attribute, grouped under a category name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct AttributeCluster {
    pub attribute: String,
    pub category: String,
    pub values: Vec<String>,
    /// Hypothesis that asked for this attribute, plus caption sources.
    #[serde(default)]
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HypothesesDocument {
    pub schema_version: u32,
    pub context: TaskContext,
    pub seed: u64,
    pub templates: Vec<String>,
    pub knowledge_count: usize,
    pub data_count: usize,
    pub hypotheses: Vec<Hypothesis>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub error_ledger: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Partial,
    Complete,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Partial | Self::Complete | Self::Failed)
    }

    /// Forward-only: pending -> running -> {partial | complete | failed}.
    pub fn can_advance_to(self, next: RunStatus) -> bool {
        matches!(
            (self, next),
            (Self::Pending, Self::Running)
                | (Self::Running, Self::Partial)
                | (Self::Running, Self::Complete)
                | (Self::Running, Self::Failed)
        )
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("illegal status transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: RunStatus,
    pub to: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Each region grounded by its own box or point.
    Instance,
    /// Whole-image box; comparison mode only.
    ImageLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunConfig {
    pub trend: TrendConfig,
    pub method: TrendMethod,
    pub k: usize,
    pub scoring: ScoringMode,
    pub target_class: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct VerificationRun {
    pub run_id: String,
    pub hypothesis_ids: Vec<String>,
    pub region_population: Vec<String>,
    pub config: RunConfig,
    pub status: RunStatus,
}

impl VerificationRun {
    pub fn advance(&mut self, next: RunStatus) -> Result<(), TransitionError> {
        if self.status.can_advance_to(next) {
            self.status = next;
            Ok(())
        } else {
            Err(TransitionError {
                from: self.status,
                to: next,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HypothesisResult {
    pub hypothesis_id: String,
    pub slice: CandidateSlice,
    pub report: TrendReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HypothesisFailure {
    pub hypothesis_id: String,
    pub error: String,
}

/// Append-only record of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunDocument {
    pub schema_version: u32,
    pub run_id: String,
    pub status: RunStatus,
    pub config: RunConfig,
    pub templates: Vec<String>,
    pub hypotheses: Vec<Hypothesis>,
    pub region_population: Vec<String>,
    pub results: Vec<HypothesisResult>,
    #[serde(default)]
    pub failures: Vec<HypothesisFailure>,
}

impl RunDocument {
    pub fn result(&self, hypothesis_id: &str) -> Option<&HypothesisResult> {
        self.results.iter().find(|r| r.hypothesis_id == hypothesis_id)
    }

    /// Adds a result unless one already exists for the hypothesis; results
    /// are idempotent by `(run_id, hypothesis_id)`. Results stay in the
    /// order of `hypotheses`.
    pub fn record(&mut self, result: HypothesisResult) -> bool {
        if self.result(&result.hypothesis_id).is_some() {
            return false;
        }
        self.failures.retain(|f| f.hypothesis_id != result.hypothesis_id);
        let order = |id: &str| {
            self.hypotheses
                .iter()
                .position(|h| h.hypothesis_id == id)
                .unwrap_or(usize::MAX)
        };
        let pos = order(&result.hypothesis_id);
        let at = self
            .results
            .iter()
            .position(|r| order(&r.hypothesis_id) > pos)
            .unwrap_or(self.results.len());
        self.results.insert(at, result);
        true
    }

    pub fn record_failure(&mut self, hypothesis_id: &str, error: impl Into<String>) {
        if self.result(hypothesis_id).is_none()
            && !self.failures.iter().any(|f| f.hypothesis_id == hypothesis_id)
        {
            self.failures.push(HypothesisFailure {
                hypothesis_id: hypothesis_id.to_string(),
                error: error.into(),
            });
        }
    }

    pub fn pending_hypotheses(&self) -> Vec<&Hypothesis> {
        self.hypotheses
            .iter()
            .filter(|h| self.result(&h.hypothesis_id).is_none())
            .collect()
    }

    pub fn slices(&self) -> Vec<CandidateSlice> {
        self.results.iter().map(|r| r.slice.clone()).collect()
    }

    pub fn reports(&self) -> Vec<TrendReport> {
        self.results.iter().map(|r| r.report.clone()).collect()
    }

    /// Terminal status implied by the recorded results.
    pub fn settle_status(&self) -> RunStatus {
        if self.failures.is_empty() {
            RunStatus::Complete
        } else if self.results.is_empty() {
            RunStatus::Failed
        } else {
            RunStatus::Partial
        }
    }
}
