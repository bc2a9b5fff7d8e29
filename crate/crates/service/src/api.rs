//! HTTP routes. Every body is a JSON document carrying `schema_version`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use errslice_core::documents::{RunDocument, RunStatus, SchemaVersionError, SCHEMA_VERSION};
use errslice_core::prompts::KNOWLEDGE_SYSTEM;
use errslice_core::structured::{parse_structured, SchemaId, StructuredDoc};
use errslice_core::trend::{trend_series, TrendMetric, TrendSeries};
use errslice_core::{ErrorRegion, Hypothesis, ImageRecord, PromptType};
use errslice_engine::gateway::{ChatRequest, Decoding};
use errslice_engine::generation::hypotheses_from_doc;
use errslice_engine::store::read_json;
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::task::{SubmitRequest, Task, TaskKind};
use crate::{parse_body, to_body, AppState};

pub const DEFAULT_PAGE_SIZE: usize = 12;
pub const MAX_PAGE_SIZE: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, JsonSchema)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub schema_version: u32,
    pub code: &'static str,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            schema_version: SCHEMA_VERSION,
            code,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn invalid(fields: Vec<FieldError>) -> Self {
        let message = fields
            .iter()
            .map(|f| if f.path.is_empty() { f.message.clone() } else { format!("{}: {}", f.path, f.message) })
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            fields,
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_payload", message)
        }
    }

    pub fn schema_version(e: SchemaVersionError) -> Self {
        Self {
            fields: vec![FieldError::new("schema_version", e.to_string())],
            ..Self::new(StatusCode::BAD_REQUEST, "unsupported_schema_version", e.to_string())
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn not_ready(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "not_ready", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn upstream(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "model_unavailable", message)
    }

    fn query(name: &str, message: impl Into<String>) -> Self {
        Self::invalid(vec![FieldError::new(name, message)])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_bytes(self.status, to_body(&self))
    }
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    json_bytes(status, to_body(value))
}

type ApiResult = Result<Response, ApiError>;
type Params = Query<HashMap<String, String>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/tasks", post(submit_task).get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/results", get(get_results))
        .route("/tasks/{id}/trend", get(get_trend))
        .route("/chat", post(chat))
        .route("/hypotheses", get(list_hypotheses))
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/gallery", get(gallery))
        .with_state(state)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    json(
        StatusCode::OK,
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "status": "ok",
            "workers": state.workers,
            "datasets": state.datasets.len(),
        }),
    )
}

async fn submit_task(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: SubmitRequest = parse_body(&body)?;
    let (task, created) = state.submit(&req)?;
    let status = if created { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok(json(status, &task))
}

/// Parses an enum from its JSON string form.
fn enum_param<T: DeserializeOwned>(params: &HashMap<String, String>, name: &str) -> Result<Option<T>, ApiError> {
    params
        .get(name)
        .map(|v| {
            serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| ApiError::query(name, format!("unknown value {v:?}")))
        })
        .transpose()
}

#[derive(Serialize, JsonSchema)]
pub(crate) struct TaskList {
    schema_version: u32,
    tasks: Vec<Task>,
}

async fn list_tasks(State(state): State<Arc<AppState>>, Query(params): Params) -> ApiResult {
    let status: Option<RunStatus> = enum_param(&params, "status")?;
    let kind: Option<TaskKind> = enum_param(&params, "kind")?;
    let tasks = state
        .store
        .list()
        .into_iter()
        .filter(|t| status.is_none_or(|s| t.status == s) && kind.is_none_or(|k| t.kind == k))
        .collect();
    Ok(json(
        StatusCode::OK,
        &TaskList {
            schema_version: SCHEMA_VERSION,
            tasks,
        },
    ))
}

fn task(state: &AppState, id: &str) -> Result<Task, ApiError> {
    state.store.get(id).ok_or_else(|| ApiError::not_found(format!("task {id} not found")))
}

async fn get_task(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    task(&state, &id)?;
    let bytes = state.store.task_bytes(&id).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(json_bytes(StatusCode::OK, bytes))
}

async fn get_results(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let t = task(&state, &id)?;
    let results_ref = match (&t.results_ref, t.status.is_terminal()) {
        (Some(r), true) => r,
        (None, true) => return Err(ApiError::not_found(format!("task {id} is {:?} without results", t.status))),
        _ => return Err(ApiError::not_ready(format!("task {id} is {:?}", t.status))),
    };
    let bytes = std::fs::read(state.store.root().join(results_ref)).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(json_bytes(StatusCode::OK, bytes))
}

#[derive(Serialize, JsonSchema)]
pub(crate) struct TrendResponse {
    schema_version: u32,
    task_id: String,
    run_id: String,
    query: String,
    series: TrendSeries,
}

async fn get_trend(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(params): Params) -> ApiResult {
    let t = task(&state, &id)?;
    if t.kind != TaskKind::Verification {
        return Err(ApiError::query("task_id", format!("task {id} is not a verification task")));
    }
    let hypothesis = params
        .get("hypothesis")
        .ok_or_else(|| ApiError::query("hypothesis", "missing query parameter"))?;
    let metric: TrendMetric = enum_param(&params, "metric")?.unwrap_or(TrendMetric::ErrorRate);
    let path = state.store.results_path(&id);
    if !path.exists() {
        let payload = state.store.payload(&t).map_err(|e| ApiError::internal(e.to_string()))?;
        return match payload.job {
            crate::task::Job::Verification { hypotheses, .. } if hypotheses.iter().any(|h| &h.hypothesis_id == hypothesis) => {
                Err(ApiError::not_ready(format!("{hypothesis} has not been scored yet")))
            }
            _ => Err(ApiError::not_found(format!("hypothesis {hypothesis} is not part of task {id}"))),
        };
    }
    let run: RunDocument = read_json(&path).map_err(|e| ApiError::internal(e.to_string()))?;
    let Some(h) = run.hypotheses.iter().find(|h| &h.hypothesis_id == hypothesis) else {
        return Err(ApiError::not_found(format!("hypothesis {hypothesis} is not part of task {id}")));
    };
    let Some(result) = run.result(hypothesis) else {
        return Err(match run.failures.iter().find(|f| &f.hypothesis_id == hypothesis) {
            Some(f) if t.status.is_terminal() => ApiError::not_ready(format!("{hypothesis} was not scored: {}", f.error)),
            _ => ApiError::not_ready(format!("{hypothesis} has not been scored yet")),
        });
    };
    Ok(json(
        StatusCode::OK,
        &TrendResponse {
            schema_version: SCHEMA_VERSION,
            task_id: id,
            run_id: run.run_id.clone(),
            query: h.query.clone(),
            series: trend_series(&result.report, metric),
        },
    ))
}

#[derive(Debug, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Role {
    User,
    Assistant,
}

#[derive(Debug, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub(crate) struct ChatMessage {
    role: Role,
    content: String,
}

#[derive(Debug, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub(crate) struct ChatBody {
    #[allow(dead_code)]
    schema_version: u32,
    messages: Vec<ChatMessage>,
}

#[derive(Serialize, JsonSchema)]
pub(crate) struct ChatReply {
    schema_version: u32,
    reply: String,
    /// Hypotheses parsed from the reply; search ones join the catalog.
    hypotheses: Vec<Hypothesis>,
}

/// One turn of the hypothesis conversation. A single user message is sent
/// as is; longer conversations are sent as a role-prefixed transcript.
async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: ChatBody = parse_body(&body)?;
    match req.messages.last() {
        None => return Err(ApiError::query("messages", "at least one message is required")),
        Some(m) if !matches!(m.role, Role::User) => {
            return Err(ApiError::query(format!("messages[{}].role", req.messages.len() - 1).as_str(), "last message must be from the user"))
        }
        _ => {}
    }
    let user = if req.messages.len() == 1 {
        req.messages[0].content.clone()
    } else {
        req.messages
            .iter()
            .map(|m| match m.role {
                Role::User => format!("User: {}", m.content),
                Role::Assistant => format!("Assistant: {}", m.content),
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    let g = state.gateway.config();
    let decoding = Decoding {
        max_tokens: state.pipeline.generation.max_tokens,
        temperature: g.generation_temperature,
        top_logprobs: 0,
        seed: Some(g.seed),
    };
    let reply = state
        .gateway
        .complete_text(&ChatRequest::text(KNOWLEDGE_SYSTEM.text, user, decoding))
        .await
        .map_err(|e| ApiError::upstream(e.to_string()))?;
    let hypotheses = match parse_structured(SchemaId::HypothesisDoc, &reply) {
        Ok(StructuredDoc::Hypotheses(doc)) => hypotheses_from_doc(doc),
        _ => Vec::new(),
    };
    state
        .catalog
        .extend(hypotheses.iter().filter(|h| h.prompt_type == PromptType::Search).cloned())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(json(
        StatusCode::OK,
        &ChatReply {
            schema_version: SCHEMA_VERSION,
            reply,
            hypotheses,
        },
    ))
}

async fn list_hypotheses(State(state): State<Arc<AppState>>) -> Response {
    json(
        StatusCode::OK,
        &serde_json::json!({"schema_version": SCHEMA_VERSION, "hypotheses": state.catalog.all()}),
    )
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Response {
    let datasets: Vec<_> = state
        .datasets
        .iter()
        .map(|(id, m)| {
            serde_json::json!({
                "dataset_id": id,
                "images": m.images.len(),
                "regions": m.regions.len(),
                "gt_slices": m.gt_slices.len(),
            })
        })
        .collect();
    json(StatusCode::OK, &serde_json::json!({"schema_version": SCHEMA_VERSION, "datasets": datasets}))
}

#[derive(Serialize, JsonSchema)]
pub(crate) struct GalleryItem<'a> {
    #[serde(flatten)]
    region: &'a ErrorRegion,
    image: Option<&'a ImageRecord>,
}

#[derive(Serialize, JsonSchema)]
pub(crate) struct GalleryPage<'a> {
    schema_version: u32,
    dataset_id: &'a str,
    page: usize,
    page_size: usize,
    total_regions: usize,
    total_pages: usize,
    regions: Vec<GalleryItem<'a>>,
}

fn usize_param(params: &HashMap<String, String>, name: &str, default: usize, range: (usize, usize)) -> Result<usize, ApiError> {
    let Some(raw) = params.get(name) else { return Ok(default) };
    match raw.parse::<usize>() {
        Ok(v) if (range.0..=range.1).contains(&v) => Ok(v),
        _ => Err(ApiError::query(name, format!("expected an integer in {}..={}, got {raw:?}", range.0, range.1))),
    }
}

/// Regions ordered by region id, 1-based pages. A page past the end is
/// empty.
async fn gallery(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(params): Params) -> ApiResult {
    let manifest = state
        .dataset(&id)
        .ok_or_else(|| ApiError::not_found(format!("dataset {id} not found")))?;
    let page = usize_param(&params, "page", 1, (1, usize::MAX))?;
    let page_size = usize_param(&params, "page_size", DEFAULT_PAGE_SIZE, (1, MAX_PAGE_SIZE))?;
    let mut regions: Vec<&ErrorRegion> = manifest.regions.iter().collect();
    regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let images = manifest.image_index();
    let total = regions.len();
    let items = regions
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|r| GalleryItem {
            region: r,
            image: images.get(r.image_id.as_str()).copied(),
        })
        .collect();
    Ok(json(
        StatusCode::OK,
        &GalleryPage {
            schema_version: SCHEMA_VERSION,
            dataset_id: &id,
            page,
            page_size,
            total_regions: total,
            total_pages: total.div_ceil(page_size),
            regions: items,
        },
    ))
}
