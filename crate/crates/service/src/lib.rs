//! Task service: durable task store, FIFO worker pool and the HTTP API used
//! by the CLI and the workbench.

pub mod api;
pub mod config;
pub mod schema;
pub mod store;
pub mod task;
mod worker;

use std::collections::BTreeMap;
use std::sync::Arc;

use errslice_core::documents::{check_schema_version, RunStatus, TaskContext, SCHEMA_VERSION};
use errslice_core::{Hypothesis, Manifest, PromptType};
use errslice_engine::generation::hypothesis_id;
use errslice_engine::{ConfigError, Gateway, PipelineConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::mpsc;

pub use api::{ApiError, FieldError};
pub use config::ServiceConfig;
use store::{Catalog, StoreError, TaskStore};
use task::{EvaluationRequest, GenerationRequest, Job, StoredPayload, SubmitRequest, Task, TaskKind, VerificationRequest};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Store(#[from] StoreError),
    #[error("dataset {dataset_id}: {message}")]
    Dataset { dataset_id: String, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub struct AppState {
    pub store: TaskStore,
    pub catalog: Catalog,
    pub datasets: BTreeMap<String, Arc<Manifest>>,
    pub pipeline: PipelineConfig,
    pub gateway: Gateway,
    pub judge: Gateway,
    pub workers: usize,
    queue: mpsc::UnboundedSender<String>,
}

#[derive(Clone)]
pub struct Service {
    state: Arc<AppState>,
}

fn load_dataset(dataset_id: &str, path: &std::path::Path) -> Result<Manifest, ServiceError> {
    let fail = |message: String| ServiceError::Dataset {
        dataset_id: dataset_id.into(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let manifest = Manifest::parse(&text).map_err(|e| fail(e.to_string()))?;
    if let Some(v) = manifest.validate().first() {
        return Err(fail(v.to_string()));
    }
    Ok(manifest)
}

impl Service {
    /// Opens the store and datasets, starts the workers and re-enqueues
    /// every pending or running task in creation order. Must be called
    /// inside a Tokio runtime.
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let pipeline = PipelineConfig::load(&config.pipeline)?;
        let gateway = pipeline.gateway(config.mock)?;
        let judge = pipeline.judge_gateway(config.mock)?;
        let datasets = config
            .datasets
            .iter()
            .map(|(id, path)| Ok((id.clone(), Arc::new(load_dataset(id, path)?))))
            .collect::<Result<_, ServiceError>>()?;
        let store = TaskStore::open(&config.store)?;
        let catalog = Catalog::open(store.root())?;
        let (tx, rx) = mpsc::unbounded_channel();
        let state = Arc::new(AppState {
            store,
            catalog,
            datasets,
            pipeline,
            gateway,
            judge,
            workers: config.workers,
            queue: tx,
        });
        let mut unfinished: Vec<Task> = state.store.list().into_iter().filter(|t| !t.status.is_terminal()).collect();
        unfinished.sort_by_key(|t| t.seq);
        for t in unfinished {
            tracing::info!(task = %t.task_id, status = ?t.status, "re-enqueued");
            state.enqueue(&t.task_id);
        }
        worker::spawn(state.clone(), rx, config.workers);
        Ok(Self { state })
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn router(&self) -> axum::Router {
        api::router(self.state.clone())
    }
}

/// Binds the listen address and serves until the process ends.
pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let service = Service::open(config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, service.router()).await?;
    Ok(())
}

fn typed<T: DeserializeOwned>(value: &serde_json::Value, prefix: &str) -> Result<T, ApiError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = match e.path().to_string().as_str() {
            "." => prefix.to_string(),
            p => format!("{prefix}.{p}"),
        };
        ApiError::invalid(vec![FieldError::new(path, e.inner().to_string())])
    })
}

/// Checks a `schema_version` field before anything else is parsed.
pub(crate) fn require_schema_version(body: &serde_json::Value) -> Result<(), ApiError> {
    match body.get("schema_version").map(|v| v.as_u64()) {
        None => Err(ApiError::invalid(vec![FieldError::new("schema_version", "missing field")])),
        Some(None) => Err(ApiError::invalid(vec![FieldError::new("schema_version", "expected an integer")])),
        Some(Some(v)) => check_schema_version(u32::try_from(v).unwrap_or(u32::MAX)).map_err(ApiError::schema_version),
    }
}

pub(crate) fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| ApiError::invalid(vec![FieldError::new("", format!("not a JSON document: {e}"))]))?;
    require_schema_version(&value)?;
    typed(&value, "").map_err(|mut e| {
        for f in &mut e.fields {
            f.path = f.path.trim_start_matches('.').to_string();
        }
        e
    })
}

impl AppState {
    fn enqueue(&self, task_id: &str) {
        // The receiver lives as long as the state.
        let _ = self.queue.send(task_id.to_string());
    }

    pub fn dataset(&self, dataset_id: &str) -> Option<&Arc<Manifest>> {
        self.datasets.get(dataset_id)
    }

    fn require_dataset(&self, dataset_id: &str, path: &str) -> Result<(), FieldError> {
        if self.datasets.contains_key(dataset_id) {
            Ok(())
        } else {
            Err(FieldError::new(path, format!("unknown dataset {dataset_id}")))
        }
    }

    /// Validates a submission into the job that will be stored.
    pub fn validate(&self, req: &SubmitRequest) -> Result<Job, ApiError> {
        let mut errors = Vec::new();
        let job = match req.kind {
            TaskKind::HypothesisGeneration => {
                let p: GenerationRequest = typed(&req.payload, "payload")?;
                errors.extend(self.require_dataset(&p.dataset_id, "payload.dataset_id").err());
                let mut context: TaskContext = self.pipeline.task.context().map_err(|e| ApiError::internal(e.to_string()))?;
                if let Some(d) = p.task_description {
                    if d.trim().is_empty() {
                        errors.push(FieldError::new("payload.task_description", "must not be empty"));
                    }
                    context.task_description = d;
                }
                Job::HypothesisGeneration {
                    dataset_id: p.dataset_id,
                    context,
                }
            }
            TaskKind::Verification => {
                let p: VerificationRequest = typed(&req.payload, "payload")?;
                errors.extend(self.require_dataset(&p.dataset_id, "payload.dataset_id").err());
                let hypotheses = self.resolve_hypotheses(&p, &mut errors);
                let mut config = self.pipeline.run_config();
                if let Some(m) = p.method {
                    config.method = m;
                }
                if let Some(s) = p.scoring {
                    config.scoring = s;
                }
                match p.k {
                    Some(0) => errors.push(FieldError::new("payload.k", "must be at least 1")),
                    Some(k) => config.k = k,
                    None => {}
                }
                Job::Verification {
                    dataset_id: p.dataset_id,
                    config,
                    hypotheses,
                }
            }
            TaskKind::Evaluation => {
                let p: EvaluationRequest = typed(&req.payload, "payload")?;
                let mut dataset_id = String::new();
                match self.store.get(&p.run_task_id) {
                    Some(t) if t.kind == TaskKind::Verification => {
                        match self.store.payload(&t).map(|s| s.job) {
                            Ok(Job::Verification { dataset_id: d, .. }) => dataset_id = d,
                            _ => errors.push(FieldError::new("payload.run_task_id", "payload unreadable")),
                        }
                        if t.status == RunStatus::Failed && t.results_ref.is_none() {
                            errors.push(FieldError::new("payload.run_task_id", format!("task {} failed without a run", t.task_id)));
                        }
                    }
                    Some(t) => errors.push(FieldError::new(
                        "payload.run_task_id",
                        format!("task {} is not a verification task", t.task_id),
                    )),
                    None => errors.push(FieldError::new("payload.run_task_id", format!("unknown task {}", p.run_task_id))),
                }
                let k = p.k.unwrap_or(self.pipeline.verification.k);
                if k == 0 {
                    errors.push(FieldError::new("payload.k", "must be at least 1"));
                }
                Job::Evaluation {
                    dataset_id,
                    run_task_id: p.run_task_id,
                    k,
                    judge: p.judge,
                }
            }
        };
        if errors.is_empty() {
            Ok(job)
        } else {
            Err(ApiError::invalid(errors))
        }
    }

    fn resolve_hypotheses(&self, p: &VerificationRequest, errors: &mut Vec<FieldError>) -> Vec<Hypothesis> {
        let mut inline = BTreeMap::new();
        for (i, h) in p.hypotheses.iter().enumerate() {
            if h.prompt_type != PromptType::Search {
                errors.push(FieldError::new(format!("payload.hypotheses[{i}].prompt_type"), "only search hypotheses can be verified"));
            }
            if h.hypothesis_id != hypothesis_id(&h.query) {
                errors.push(FieldError::new(
                    format!("payload.hypotheses[{i}].hypothesis_id"),
                    format!("expected {} for query {:?}", hypothesis_id(&h.query), h.query),
                ));
            }
            inline.insert(h.hypothesis_id.clone(), h.clone());
        }
        if p.hypothesis_ids.is_empty() {
            errors.push(FieldError::new("payload.hypothesis_ids", "at least one hypothesis id is required"));
        }
        let mut out: Vec<Hypothesis> = Vec::new();
        for (i, id) in p.hypothesis_ids.iter().enumerate() {
            let path = format!("payload.hypothesis_ids[{i}]");
            if out.iter().any(|h| &h.hypothesis_id == id) {
                errors.push(FieldError::new(path, format!("duplicate hypothesis id {id}")));
                continue;
            }
            match inline.get(id).cloned().or_else(|| self.catalog.get(id)) {
                Some(h) => out.push(h),
                None => errors.push(FieldError::new(path, format!("unknown hypothesis id {id}"))),
            }
        }
        out
    }

    /// Validates and persists a submission; an idempotency key already
    /// seen returns the existing task. The flag is true for a new task.
    pub fn submit(&self, req: &SubmitRequest) -> Result<(Task, bool), ApiError> {
        check_schema_version(req.schema_version).map_err(ApiError::schema_version)?;
        if let Some(key) = &req.idempotency_key {
            if let Some(t) = self.store.list().into_iter().find(|t| t.idempotency_key.as_ref() == Some(key)) {
                return Ok((t, false));
            }
        }
        let job = self.validate(req)?;
        let payload = StoredPayload {
            schema_version: SCHEMA_VERSION,
            job,
        };
        let (task, created) = self
            .store
            .create(&payload, req.idempotency_key.clone())
            .map_err(|e| ApiError::internal(e.to_string()))?;
        if created {
            self.enqueue(&task.task_id);
        }
        Ok((task, created))
    }
}

/// JSON with a trailing newline, as stored documents are written.
pub(crate) fn to_body<T: Serialize>(value: &T) -> Vec<u8> {
    errslice_engine::store::to_json_pretty(value).into_bytes()
}
