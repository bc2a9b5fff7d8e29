//! Task store: a document directory with an index file.
//!
//! ```text
//! <root>/index.json
//! <root>/catalog.json
//! <root>/tasks/t-000001.json
//! <root>/payloads/t-000001.json
//! <root>/results/t-000001.json
//! ```
//!
//! Task files are the source of truth; the index is rewritten after each
//! creation and rebuilt from them on open. Every write is write-then-rename.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::Utc;
use errslice_core::documents::{RunStatus, SCHEMA_VERSION};
use errslice_core::Hypothesis;
use errslice_engine::store::{read_json, write_json_atomic};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::task::{Progress, StoredPayload, Task};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("task {0} not found")]
    NotFound(String),
    #[error("task {task_id} is {status:?} and can no longer change")]
    Immutable { task_id: String, status: RunStatus },
}

#[derive(Debug, Default, Serialize, Deserialize, JsonSchema)]
struct Index {
    schema_version: u32,
    next_seq: u64,
    tasks: Vec<String>,
    idempotency: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
struct State {
    index: Index,
    tasks: BTreeMap<String, Task>,
}

pub struct TaskStore {
    root: PathBuf,
    state: RwLock<State>,
}

fn task_id(seq: u64) -> String {
    format!("t-{seq:06}")
}

impl TaskStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["tasks", "payloads", "results"] {
            std::fs::create_dir_all(root.join(dir))?;
        }
        let mut state = State::default();
        for entry in std::fs::read_dir(root.join("tasks"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let task: Task = read_json(&path)?;
                state.tasks.insert(task.task_id.clone(), task);
            }
        }
        let stored: Index = match read_json(&root.join("index.json")) {
            Ok(i) => i,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Index::default(),
            Err(e) => return Err(e.into()),
        };
        let max_seq = state.tasks.values().map(|t| t.seq).max().unwrap_or(0);
        let mut by_seq: Vec<&Task> = state.tasks.values().collect();
        by_seq.sort_by_key(|t| t.seq);
        state.index = Index {
            schema_version: SCHEMA_VERSION,
            next_seq: stored.next_seq.max(max_seq + 1),
            tasks: by_seq.iter().map(|t| t.task_id.clone()).collect(),
            idempotency: by_seq
                .iter()
                .filter_map(|t| Some((t.idempotency_key.clone()?, t.task_id.clone())))
                .collect(),
        };
        write_json_atomic(&root.join("index.json"), &state.index)?;
        Ok(Self {
            root,
            state: RwLock::new(state),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Persists a new pending task, or returns the task already holding the
    /// idempotency key. The flag is true for a new task.
    pub fn create(&self, payload: &StoredPayload, idempotency_key: Option<String>) -> Result<(Task, bool), StoreError> {
        let mut state = self.state.write().expect("store lock");
        if let Some(existing) = idempotency_key.as_ref().and_then(|k| state.index.idempotency.get(k)) {
            return Ok((state.tasks[existing].clone(), false));
        }
        let seq = state.index.next_seq.max(1);
        let id = task_id(seq);
        let payload_ref = format!("payloads/{id}.json");
        write_json_atomic(&self.root.join(&payload_ref), payload)?;
        let now = Utc::now();
        let task = Task {
            schema_version: SCHEMA_VERSION,
            task_id: id.clone(),
            seq,
            kind: payload.job.kind(),
            status: RunStatus::Pending,
            progress: Progress {
                done: 0,
                total: payload.job.total(),
            },
            created_at: now,
            updated_at: now,
            payload_ref,
            results_ref: None,
            error_ledger: Vec::new(),
            idempotency_key: idempotency_key.clone(),
        };
        write_json_atomic(&self.task_path(&id), &task)?;
        state.index.next_seq = seq + 1;
        state.index.tasks.push(id.clone());
        if let Some(key) = idempotency_key {
            state.index.idempotency.insert(key, id.clone());
        }
        write_json_atomic(&self.root.join("index.json"), &state.index)?;
        state.tasks.insert(id, task.clone());
        Ok((task, true))
    }

    pub fn get(&self, task_id: &str) -> Option<Task> {
        self.state.read().expect("store lock").tasks.get(task_id).cloned()
    }

    /// All tasks, newest first.
    pub fn list(&self) -> Vec<Task> {
        let state = self.state.read().expect("store lock");
        let mut tasks: Vec<Task> = state.tasks.values().cloned().collect();
        tasks.sort_by(|a, b| b.seq.cmp(&a.seq));
        tasks
    }

    /// Applies `f` and writes the task through. Terminal tasks are refused.
    pub fn update(&self, task_id: &str, f: impl FnOnce(&mut Task)) -> Result<Task, StoreError> {
        let mut state = self.state.write().expect("store lock");
        let task = state
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| StoreError::NotFound(task_id.into()))?;
        if task.status.is_terminal() {
            return Err(StoreError::Immutable {
                task_id: task_id.into(),
                status: task.status,
            });
        }
        let mut next = task.clone();
        f(&mut next);
        next.progress.done = next.progress.done.min(next.progress.total);
        next.updated_at = Utc::now();
        write_json_atomic(&self.task_path(task_id), &next)?;
        *task = next.clone();
        Ok(next)
    }

    pub fn task_path(&self, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(format!("{task_id}.json"))
    }

    pub fn results_ref(task_id: &str) -> String {
        format!("results/{task_id}.json")
    }

    pub fn results_path(&self, task_id: &str) -> PathBuf {
        self.root.join(Self::results_ref(task_id))
    }

    pub fn payload(&self, task: &Task) -> Result<StoredPayload, StoreError> {
        Ok(read_json(&self.root.join(&task.payload_ref))?)
    }

    /// The task file as stored.
    pub fn task_bytes(&self, task_id: &str) -> Result<Vec<u8>, StoreError> {
        let _held = self.state.read().expect("store lock");
        Ok(std::fs::read(self.task_path(task_id))?)
    }
}

#[derive(Debug, Default, Serialize, Deserialize, JsonSchema)]
struct CatalogDoc {
    schema_version: u32,
    hypotheses: Vec<Hypothesis>,
}

/// Hypotheses known to the service, by id, persisted as `catalog.json`.
pub struct Catalog {
    path: PathBuf,
    entries: RwLock<BTreeMap<String, Hypothesis>>,
}

impl Catalog {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let path = root.join("catalog.json");
        let doc: CatalogDoc = match read_json(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => CatalogDoc::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            path,
            entries: RwLock::new(doc.hypotheses.into_iter().map(|h| (h.hypothesis_id.clone(), h)).collect()),
        })
    }

    pub fn get(&self, id: &str) -> Option<Hypothesis> {
        self.entries.read().expect("catalog lock").get(id).cloned()
    }

    pub fn all(&self) -> Vec<Hypothesis> {
        self.entries.read().expect("catalog lock").values().cloned().collect()
    }

    /// Adds hypotheses not already present; existing entries are kept.
    pub fn extend(&self, hypotheses: impl IntoIterator<Item = Hypothesis>) -> Result<(), StoreError> {
        let mut entries = self.entries.write().expect("catalog lock");
        let before = entries.len();
        for h in hypotheses {
            entries.entry(h.hypothesis_id.clone()).or_insert(h);
        }
        if entries.len() != before {
            let doc = CatalogDoc {
                schema_version: SCHEMA_VERSION,
                hypotheses: entries.values().cloned().collect(),
            };
            write_json_atomic(&self.path, &doc)?;
        }
        Ok(())
    }
}
