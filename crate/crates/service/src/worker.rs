//! Task execution. One worker runs one task at a time; tasks are taken FIFO
//! from a shared queue.

use std::sync::Arc;
use std::time::Duration;

use errslice_core::documents::{RunDocument, RunStatus};
use errslice_engine::evaluate::evaluate_manifest_run;
use errslice_engine::generation::{hypotheses_document, run_generation};
use errslice_engine::store::{read_json, write_json_atomic};
use errslice_engine::verify::{new_run, run_verification};
use tokio::sync::{mpsc, Mutex};

use crate::store::TaskStore;
use crate::task::{Job, Task};
use crate::AppState;

const SOURCE_POLL: Duration = Duration::from_millis(25);

pub(crate) fn spawn(state: Arc<AppState>, queue: mpsc::UnboundedReceiver<String>, workers: usize) {
    let queue = Arc::new(Mutex::new(queue));
    for _ in 0..workers {
        let (state, queue) = (state.clone(), queue.clone());
        tokio::spawn(async move {
            loop {
                let next = queue.lock().await.recv().await;
                let Some(task_id) = next else { break };
                execute(&state, &task_id).await;
            }
        });
    }
}

struct Outcome {
    status: RunStatus,
    ledger: Vec<String>,
}

impl Outcome {
    fn failed(message: impl Into<String>) -> Self {
        Self {
            status: RunStatus::Failed,
            ledger: vec![message.into()],
        }
    }
}

pub(crate) async fn execute(state: &AppState, task_id: &str) {
    let Some(task) = state.store.get(task_id) else { return };
    if task.status.is_terminal() {
        return;
    }
    if task.status == RunStatus::Pending {
        if let Err(e) = state.store.update(task_id, |t| t.status = RunStatus::Running) {
            tracing::error!(task = task_id, error = %e, "cannot start task");
            return;
        }
    }
    tracing::info!(task = task_id, kind = ?task.kind, "running");
    let outcome = match state.store.payload(&task) {
        Ok(payload) => match payload.job {
            Job::HypothesisGeneration { dataset_id, context } => generate(state, &task, &dataset_id, &context).await,
            Job::Verification {
                dataset_id,
                config,
                hypotheses,
            } => verify(state, &task, &dataset_id, config, hypotheses).await,
            Job::Evaluation {
                dataset_id,
                run_task_id,
                k,
                judge,
            } => evaluate(state, &task, &dataset_id, &run_task_id, k, judge).await,
        },
        Err(e) => Outcome::failed(format!("payload: {e}")),
    };
    let has_results = state.store.results_path(task_id).exists();
    let finished = state.store.update(task_id, |t| {
        t.status = outcome.status;
        t.error_ledger = outcome.ledger;
        if t.status == RunStatus::Complete {
            t.progress.done = t.progress.total;
        }
        if has_results {
            t.results_ref = Some(TaskStore::results_ref(task_id));
        }
    });
    match finished {
        Ok(t) => tracing::info!(task = task_id, status = ?t.status, "finished"),
        Err(e) => tracing::error!(task = task_id, error = %e, "cannot record outcome"),
    }
}

async fn generate(
    state: &AppState,
    task: &Task,
    dataset_id: &str,
    context: &errslice_core::documents::TaskContext,
) -> Outcome {
    let Some(manifest) = state.datasets.get(dataset_id) else {
        return Outcome::failed(format!("dataset {dataset_id} is no longer configured"));
    };
    let seed = state.pipeline.seed;
    let output = match run_generation(&state.gateway, context, manifest, &state.pipeline.generation, seed).await {
        Ok(o) => o,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let doc = hypotheses_document(context, seed, &output);
    if let Err(e) = write_json_atomic(&state.store.results_path(&task.task_id), &doc) {
        return Outcome::failed(e.to_string());
    }
    if let Err(e) = state.catalog.extend(output.hypotheses) {
        return Outcome::failed(e.to_string());
    }
    Outcome {
        status: RunStatus::Complete,
        ledger: output.error_ledger,
    }
}

async fn verify(
    state: &AppState,
    task: &Task,
    dataset_id: &str,
    config: errslice_core::documents::RunConfig,
    hypotheses: Vec<errslice_core::Hypothesis>,
) -> Outcome {
    let Some(manifest) = state.datasets.get(dataset_id) else {
        return Outcome::failed(format!("dataset {dataset_id} is no longer configured"));
    };
    let mut run = match new_run(config, hypotheses, manifest) {
        Ok(r) => r,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let path = state.store.results_path(&task.task_id);
    if let Ok(existing) = read_json::<RunDocument>(&path) {
        if existing.run_id == run.run_id {
            tracing::info!(task = %task.task_id, done = existing.results.len(), "resuming run");
            run = existing;
        }
    }
    if !run.status.is_terminal() {
        let width = state.pipeline.verification.width;
        let store = &state.store;
        let verified = run_verification(&state.gateway, &mut run, manifest, width, |r| {
            write_json_atomic(&path, r)?;
            store
                .update(&task.task_id, |t| t.progress.done = r.results.len() + r.failures.len())
                .map_err(std::io::Error::other)?;
            Ok(())
        })
        .await;
        if let Err(e) = verified {
            return Outcome::failed(e.to_string());
        }
    }
    Outcome {
        status: run.status,
        ledger: run
            .failures
            .iter()
            .map(|f| format!("{}: {}", f.hypothesis_id, f.error))
            .collect(),
    }
}

async fn evaluate(
    state: &AppState,
    task: &Task,
    dataset_id: &str,
    run_task_id: &str,
    k: usize,
    judge: bool,
) -> Outcome {
    let source = loop {
        match state.store.get(run_task_id) {
            Some(t) if t.status.is_terminal() => break t,
            Some(_) => tokio::time::sleep(SOURCE_POLL).await,
            None => return Outcome::failed(format!("task {run_task_id} not found")),
        }
    };
    let Some(results_ref) = source.results_ref else {
        return Outcome::failed(format!("task {run_task_id} produced no run document"));
    };
    let Some(manifest) = state.datasets.get(dataset_id) else {
        return Outcome::failed(format!("dataset {dataset_id} is no longer configured"));
    };
    let run: RunDocument = match read_json(&state.store.root().join(results_ref)) {
        Ok(r) => r,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    let doc = match evaluate_manifest_run(manifest, &run, k, judge.then_some(&state.judge)).await {
        Ok(d) => d,
        Err(e) => return Outcome::failed(e.to_string()),
    };
    if let Err(e) = write_json_atomic(&state.store.results_path(&task.task_id), &doc) {
        return Outcome::failed(e.to_string());
    }
    Outcome {
        status: RunStatus::Complete,
        ledger: doc.judge_errors,
    }
}
