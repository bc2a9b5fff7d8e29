//! Uniform access to one text model (LLM) and one vision-language model (VLM).

mod mock;
mod openai;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use errslice_core::confidence::{verdict_from_text, verdict_from_top_logprobs};
use errslice_core::prompts::{caption_system, format_box, grounded_question};
use errslice_core::structured::{parse_structured, SchemaId, StructuredDoc};
use errslice_core::{AnswerVariants, Grounding, ImageRecord, TokenLogprob, YesNoVerdict};
use rand::Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use mock::{CaptionRule, LlmRule, MockFixture, MockLlm, MockVlm, VlmRule};
pub use openai::{EndpointConfig, OpenAiBackend};

/// Endpoints must return at least this many alternatives at the first
/// generated position so every answer variant can be found.
pub const MIN_TOP_LOGPROBS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub struct ImageRef {
    pub image_id: String,
    pub uri: String,
}

impl ImageRef {
    pub fn of(image: &ImageRecord) -> Self {
        Self {
            image_id: image.image_id.clone(),
            uri: image.uri.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UserPart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Decoding {
    pub max_tokens: u32,
    pub temperature: f64,
    /// 0 disables logprobs.
    pub top_logprobs: u32,
    pub seed: Option<u64>,
}

impl Decoding {
    pub fn greedy(max_tokens: u32, seed: u64) -> Self {
        Self {
            max_tokens,
            temperature: 0.0,
            top_logprobs: 0,
            seed: Some(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub decoding: Decoding,
}

impl ChatRequest {
    pub fn text(system_prompt: impl Into<String>, user: impl Into<String>, decoding: Decoding) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_parts: vec![UserPart::Text(user.into())],
            decoding,
        }
    }

    /// Text parts joined by newlines.
    pub fn user_text(&self) -> String {
        let texts: Vec<&str> = self
            .user_parts
            .iter()
            .filter_map(|p| match p {
                UserPart::Text(t) => Some(t.as_str()),
                UserPart::Image(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    pub fn image(&self) -> Option<&ImageRef> {
        self.user_parts.iter().find_map(|p| match p {
            UserPart::Image(i) => Some(i),
            UserPart::Text(_) => None,
        })
    }

    fn prompt_chars(&self) -> usize {
        self.system_prompt.chars().count() + self.user_text().chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatReply {
    pub text: String,
    /// Alternatives at the first generated position, if requested.
    pub top_logprobs: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("context length exceeded: {0}")]
    ContextOverflow(String),
    #[error("{0}")]
    Fatal(String),
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;

    /// Largest `top_logprobs` the endpoint honours; `None` without logprobs.
    fn max_top_logprobs(&self) -> Option<u32>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("input too large: {0}")]
    InputTooLarge(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("no valid {schema} after {attempts} attempts: {message}")]
    Structured {
        schema: SchemaId,
        attempts: u32,
        message: String,
        last_raw: String,
    },
    #[error("invalid grounding: {0}")]
    InvalidGrounding(String),
    #[error("unreadable answer: {0}")]
    Unreadable(String),
    #[error("endpoint capability: {0}")]
    Capability(String),
    #[error("not dispatched: endpoint outage")]
    NotDispatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 1000,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            base_delay_ms: 0,
            jitter: 0.0,
            ..Self::default()
        }
    }

    /// `base * 2^retry`, scaled by a uniform factor in `1 ± jitter`.
    pub fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay_ms as f64 * 2f64.powi(retry as i32);
        let factor = if self.jitter > 0.0 {
            rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64(base * factor / 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct GatewayConfig {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub max_prompt_chars: usize,
    pub top_logprobs: u32,
    pub variants: AnswerVariants,
    pub generation_temperature: f64,
    pub seed: u64,
    /// Consecutive transport failures after which a batch stops dispatching.
    pub outage_threshold: usize,
    pub record_dispatch: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            max_prompt_chars: 200_000,
            top_logprobs: MIN_TOP_LOGPROBS,
            variants: AnswerVariants::default(),
            generation_temperature: 0.7,
            seed: 0,
            outage_threshold: 3,
            record_dispatch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub image_id: String,
    pub query: String,
}

#[derive(Debug, Clone)]
pub struct ScoreJob {
    pub image: ImageRef,
    pub grounding: Grounding,
    pub query: String,
}

pub type JobResult = Result<YesNoVerdict, GatewayError>;

#[derive(Debug, Clone, Error)]
#[error("endpoint outage: {failed} consecutive transport failures, {undispatched} jobs not dispatched")]
pub struct BatchError {
    pub failed: usize,
    pub undispatched: usize,
    /// Positionally aligned with the input jobs.
    pub results: Vec<JobResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structured {
    pub doc: StructuredDoc,
    pub attempts: u32,
    pub raw: String,
}

struct Inner {
    llm: Arc<dyn ChatBackend>,
    vlm: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    permits: Arc<Semaphore>,
    retries: AtomicUsize,
    dispatch_log: Mutex<Vec<DispatchRecord>>,
}

/// Cheap to clone; clones share backends, the in-flight limit and counters.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    /// Fails when the VLM cannot return enough top-logprobs for yes/no
    /// extraction.
    pub fn new(
        llm: Arc<dyn ChatBackend>,
        vlm: Arc<dyn ChatBackend>,
        config: GatewayConfig,
    ) -> Result<Self, GatewayError> {
        if config.top_logprobs < MIN_TOP_LOGPROBS {
            return Err(GatewayError::Capability(format!(
                "top_logprobs is {}, at least {MIN_TOP_LOGPROBS} required",
                config.top_logprobs
            )));
        }
        match vlm.max_top_logprobs() {
            None => {
                return Err(GatewayError::Capability(
                    "VLM endpoint does not return logprobs".into(),
                ))
            }
            Some(n) if n < config.top_logprobs => {
                return Err(GatewayError::Capability(format!(
                    "VLM endpoint returns at most {n} top logprobs, {} required",
                    config.top_logprobs
                )))
            }
            Some(_) => {}
        }
        let permits = Arc::new(Semaphore::new(config.max_in_flight.max(1)));
        Ok(Self {
            inner: Arc::new(Inner {
                llm,
                vlm,
                config,
                permits,
                retries: AtomicUsize::new(0),
                dispatch_log: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    /// Transport retries performed so far.
    pub fn retries(&self) -> usize {
        self.inner.retries.load(Ordering::SeqCst)
    }

    pub fn dispatch_log(&self) -> Vec<DispatchRecord> {
        self.inner.dispatch_log.lock().unwrap().clone()
    }

    async fn call(
        &self,
        backend: &dyn ChatBackend,
        request: &ChatRequest,
        caller_holds_permit: bool,
    ) -> Result<ChatReply, GatewayError> {
        let cfg = &self.inner.config;
        let chars = request.prompt_chars();
        if chars > cfg.max_prompt_chars {
            return Err(GatewayError::InputTooLarge(format!(
                "prompt has {chars} characters, limit is {}",
                cfg.max_prompt_chars
            )));
        }
        let mut retry = 0;
        loop {
            let permit = if caller_holds_permit {
                None
            } else {
                Some(self.inner.permits.acquire().await.expect("semaphore closed"))
            };
            let outcome = backend.chat(request).await;
            drop(permit);
            match outcome {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Transient(message)) => {
                    if retry >= cfg.retry.max_retries {
                        return Err(GatewayError::Transport {
                            attempts: retry + 1,
                            message,
                        });
                    }
                    tracing::debug!(retry, %message, "retrying transient failure");
                    self.inner.retries.fetch_add(1, Ordering::SeqCst);
                    tokio::time::sleep(cfg.retry.delay(retry)).await;
                    retry += 1;
                }
                Err(BackendError::ContextOverflow(m)) => return Err(GatewayError::InputTooLarge(m)),
                Err(BackendError::Fatal(m)) => return Err(GatewayError::Rejected(m)),
            }
        }
    }

    /// Full generation from the LLM.
    pub async fn complete_text(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        Ok(self.call(&*self.inner.llm, request, false).await?.text)
    }

    /// LLM generation parsed against `schema`. Invalid replies are re-asked
    /// with the validation error appended, up to three attempts in total.
    pub async fn complete_structured(
        &self,
        request: &ChatRequest,
        schema: SchemaId,
    ) -> Result<Structured, GatewayError> {
        const ATTEMPTS: u32 = 3;
        let mut current = request.clone();
        let mut last_raw = String::new();
        let mut message = String::new();
        for attempt in 1..=ATTEMPTS {
            let raw = self.complete_text(&current).await?;
            match parse_structured(schema, &raw) {
                Ok(doc) => {
                    return Ok(Structured {
                        doc,
                        attempts: attempt,
                        raw,
                    })
                }
                Err(e) => {
                    tracing::debug!(attempt, %schema, error = %e, "structured reply rejected");
                    message = e.0;
                    last_raw = raw;
                    current = request.clone();
                    current.user_parts.push(UserPart::Text(format!(
                        "Your previous reply could not be used: {message}. Reply again with only the corrected output."
                    )));
                }
            }
        }
        Err(GatewayError::Structured {
            schema,
            attempts: ATTEMPTS,
            message,
            last_raw,
        })
    }

    pub fn yes_no_request(
        &self,
        image: &ImageRef,
        grounding: &Grounding,
        query: &str,
    ) -> Result<ChatRequest, GatewayError> {
        if grounding.prompt_box().is_some() && !grounding.has_positive_area() {
            return Err(GatewayError::InvalidGrounding(format!("zero-area box {:?}", grounding.bbox)));
        }
        let question = grounded_question(grounding, query).ok_or_else(|| {
            GatewayError::InvalidGrounding(format!("{:?} grounding without coordinates", grounding.kind))
        })?;
        Ok(ChatRequest {
            system_prompt: String::new(),
            user_parts: vec![UserPart::Image(image.clone()), UserPart::Text(question)],
            decoding: Decoding {
                max_tokens: 1,
                temperature: 0.0,
                top_logprobs: self.inner.config.top_logprobs,
                seed: Some(self.inner.config.seed),
            },
        })
    }

    fn verdict(&self, reply: &ChatReply) -> JobResult {
        if let Some(v) = verdict_from_top_logprobs(&reply.top_logprobs, &self.inner.config.variants) {
            return Ok(v);
        }
        verdict_from_text(&reply.text).map_err(|e| GatewayError::Unreadable(e.to_string()))
    }

    pub async fn score_yes_no(&self, image: &ImageRef, grounding: &Grounding, query: &str) -> JobResult {
        let request = self.yes_no_request(image, grounding, query)?;
        let reply = self.call(&*self.inner.vlm, &request, false).await?;
        self.verdict(&reply)
    }

    /// Scores every job, dispatching jobs that share an image adjacently.
    /// Results are aligned with `jobs`; per-job failures stay in place.
    /// After `outage_threshold` consecutive transport failures the rest of
    /// the batch is not dispatched and a [`BatchError`] carries the partial
    /// results.
    pub async fn score_batch(&self, jobs: &[ScoreJob]) -> Result<Vec<JobResult>, BatchError> {
        let threshold = self.inner.config.outage_threshold.max(1);
        let consecutive = Arc::new(AtomicUsize::new(0));
        let mut results: Vec<Option<JobResult>> = vec![None; jobs.len()];
        let mut handles = Vec::new();
        for idx in grouped_order(jobs) {
            if consecutive.load(Ordering::SeqCst) >= threshold {
                break;
            }
            let job = &jobs[idx];
            let request = match self.yes_no_request(&job.image, &job.grounding, &job.query) {
                Ok(r) => r,
                Err(e) => {
                    results[idx] = Some(Err(e));
                    continue;
                }
            };
            let permit = self.inner.permits.clone().acquire_owned().await.expect("semaphore closed");
            if consecutive.load(Ordering::SeqCst) >= threshold {
                break;
            }
            if self.inner.config.record_dispatch {
                self.inner.dispatch_log.lock().unwrap().push(DispatchRecord {
                    image_id: job.image.image_id.clone(),
                    query: job.query.clone(),
                });
            }
            let gateway = self.clone();
            let consecutive = consecutive.clone();
            handles.push((
                idx,
                tokio::spawn(async move {
                    let outcome = gateway
                        .call(&*gateway.inner.vlm, &request, true)
                        .await
                        .and_then(|reply| gateway.verdict(&reply));
                    if matches!(outcome, Err(GatewayError::Transport { .. })) {
                        consecutive.fetch_add(1, Ordering::SeqCst);
                    } else {
                        consecutive.store(0, Ordering::SeqCst);
                    }
                    drop(permit);
                    outcome
                }),
            ));
        }
        for (idx, handle) in handles {
            results[idx] = Some(
                handle
                    .await
                    .unwrap_or_else(|e| Err(GatewayError::Rejected(format!("scoring task panicked: {e}")))),
            );
        }
        let undispatched = results.iter().filter(|r| r.is_none()).count();
        let results: Vec<JobResult> = results
            .into_iter()
            .map(|r| r.unwrap_or(Err(GatewayError::NotDispatched)))
            .collect();
        let failed = consecutive.load(Ordering::SeqCst);
        if failed >= threshold {
            Err(BatchError {
                failed,
                undispatched,
                results,
            })
        } else {
            Ok(results)
        }
    }

    pub fn caption_request(
        &self,
        image: &ImageRef,
        grounding: &Grounding,
        attribute: &str,
    ) -> Result<ChatRequest, GatewayError> {
        let b = grounding
            .prompt_box()
            .filter(|_| grounding.has_positive_area())
            .ok_or_else(|| GatewayError::InvalidGrounding("captioning needs a box with positive area".into()))?;
        Ok(ChatRequest {
            system_prompt: caption_system(attribute),
            user_parts: vec![
                UserPart::Image(image.clone()),
                UserPart::Text(format!("Region: {}", format_box(b))),
            ],
            decoding: Decoding::greedy(256, self.inner.config.seed),
        })
    }

    /// Attribute-aware caption of one region from the VLM.
    pub async fn caption_region(
        &self,
        image: &ImageRef,
        grounding: &Grounding,
        attribute: &str,
    ) -> Result<String, GatewayError> {
        let request = self.caption_request(image, grounding, attribute)?;
        Ok(self.call(&*self.inner.vlm, &request, false).await?.text.trim().to_string())
    }
}

/// Job indices grouped by image in order of each image's first appearance;
/// input order is kept within a group.
pub fn grouped_order(jobs: &[ScoreJob]) -> Vec<usize> {
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let group_of: Vec<usize> = jobs
        .iter()
        .map(|job| {
            let next = first_seen.len();
            *first_seen.entry(job.image.image_id.as_str()).or_insert(next)
        })
        .collect();
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| (group_of[i], i));
    order
}
