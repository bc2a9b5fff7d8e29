//! JSON Schemas for every document the CLI and service read or write. The
//! files under `schemas/` are generated from these types.

use errslice_core::documents::{HypothesesDocument, RunDocument};
use errslice_core::trend::TrendSeries;
use errslice_core::Manifest;
use errslice_engine::evaluate::{CategoryChart, EvaluationDocument};
use schemars::{schema_for, JsonSchema, Schema};
use serde_json::Value;

use crate::api::{ApiError, ChatBody, ChatReply, GalleryPage, TaskList, TrendResponse};
use crate::task::{EvaluationRequest, GenerationRequest, StoredPayload, Task, VerificationRequest};

/// Body of `POST /tasks`, with the payload typed by `kind`.
#[allow(dead_code)]
#[derive(JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Submission {
    HypothesisGeneration {
        schema_version: u32,
        #[serde(default)]
        idempotency_key: Option<String>,
        payload: GenerationRequest,
    },
    Verification {
        schema_version: u32,
        #[serde(default)]
        idempotency_key: Option<String>,
        payload: VerificationRequest,
    },
    Evaluation {
        schema_version: u32,
        #[serde(default)]
        idempotency_key: Option<String>,
        payload: EvaluationRequest,
    },
}

fn named(file: &'static str, schema: Schema) -> (&'static str, Value) {
    (file, serde_json::to_value(schema).expect("schema serializes"))
}

/// `(file name, schema)` for every shipped schema.
pub fn all() -> Vec<(&'static str, Value)> {
    vec![
        named("manifest.schema.json", schema_for!(Manifest)),
        named("hypotheses.schema.json", schema_for!(HypothesesDocument)),
        named("run.schema.json", schema_for!(RunDocument)),
        named("evaluation.schema.json", schema_for!(EvaluationDocument)),
        named("category-chart.schema.json", schema_for!(CategoryChart)),
        named("task.schema.json", schema_for!(Task)),
        named("task-list.schema.json", schema_for!(TaskList)),
        named("task-submit.schema.json", schema_for!(Submission)),
        named("task-payload.schema.json", schema_for!(StoredPayload)),
        named("trend.schema.json", schema_for!(TrendResponse)),
        named("trend-series.schema.json", schema_for!(TrendSeries)),
        named("chat-request.schema.json", schema_for!(ChatBody)),
        named("chat-reply.schema.json", schema_for!(ChatReply)),
        named("gallery.schema.json", schema_for!(GalleryPage<'static>)),
        named("error.schema.json", schema_for!(ApiError)),
    ]
}
