//! Core of the error-slice discovery workbench: domain model, manifest
//! validation, grounded slice confidence, slope trend analysis and
//! slice-level evaluation metrics.
//!
//! This crate does no I/O and builds for `wasm32-unknown-unknown`.

pub mod confidence;
pub mod documents;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod sampling;
pub mod serde_ext;
pub mod structured;
pub mod trend;

pub use confidence::{p_yes_from_logits, AnswerVariants, TokenLogprob, YesNoVerdict};
pub use documents::{
    AttributeCluster, HypothesesDocument, RunConfig, RunDocument, RunStatus, ScoringMode,
    TaskContext, VerificationRun, SCHEMA_VERSION,
};
pub use manifest::{Manifest, Violation};
pub use metrics::{best_slice_per_gt, identification_f1, precision_at_k, JudgeDecision};
pub use model::*;
pub use trend::{
    error_rate_threshold_baseline, slope_trend_analysis, TrendConfig, TrendMethod, TrendMetric,
    TrendReport,
};
