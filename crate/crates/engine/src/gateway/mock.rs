//! Deterministic backends driven by a replies fixture.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use errslice_core::TokenLogprob;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatReply, ChatRequest, MIN_TOP_LOGPROBS};

/// Canned LLM replies. The first rule whose substrings all match wins; a
/// rule with several replies returns them in sequence and then repeats the
/// last one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LlmRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    pub replies: Vec<String>,
    /// Transient failures returned before the first reply.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub transient_failures: usize,
}

/// Yes/no behaviour for matching questions. At most one answer field is
/// used, in the order `fail`, `text`, `logits`, `p_yes`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct VlmRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_yes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 2]>,
    /// Answer text with no logprobs, exercising the fallback path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fail: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CaptionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_contains: Option<String>,
    pub caption: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MockFixture {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub llm: Vec<LlmRule>,
    #[serde(default)]
    pub vlm: Vec<VlmRule>,
    #[serde(default)]
    pub captions: Vec<CaptionRule>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

fn contains(haystack: &str, needle: &Option<String>) -> bool {
    needle.as_deref().is_none_or(|n| haystack.contains(n))
}

fn prefixed(image_id: &str, prefix: &Option<String>) -> bool {
    prefix.as_deref().is_none_or(|p| image_id.starts_with(p))
}

#[derive(Debug, Default)]
pub struct MockLlm {
    rules: Vec<LlmRule>,
    calls: Mutex<Vec<usize>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockLlm {
    pub fn new(rules: Vec<LlmRule>) -> Self {
        let calls = Mutex::new(vec![0; rules.len()]);
        Self {
            rules,
            calls,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

#[async_trait]
impl ChatBackend for MockLlm {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        self.log.lock().unwrap().push(request.clone());
        let user = request.user_text();
        let Some(i) = self
            .rules
            .iter()
            .position(|r| contains(&request.system_prompt, &r.system_contains) && contains(&user, &r.user_contains))
        else {
            return Err(BackendError::Fatal("mock LLM has no canned reply for this prompt".into()));
        };
        let rule = &self.rules[i];
        let n = {
            let mut calls = self.calls.lock().unwrap();
            calls[i] += 1;
            calls[i] - 1
        };
        if n < rule.transient_failures {
            return Err(BackendError::Transient(format!("mock 503 ({} of {})", n + 1, rule.transient_failures)));
        }
        let k = (n - rule.transient_failures).min(rule.replies.len().saturating_sub(1));
        let text = rule.replies.get(k).cloned().unwrap_or_default();
        Ok(ChatReply {
            text,
            top_logprobs: Vec::new(),
        })
    }

    fn max_top_logprobs(&self) -> Option<u32> {
        Some(MIN_TOP_LOGPROBS)
    }
}

/// Mock VLM. Yes/no questions are answered from the first matching rule or,
/// failing that, from logits hashed from `(seed, image, prompt)`; captions
/// come from caption rules.
#[derive(Debug)]
pub struct MockVlm {
    rules: Vec<VlmRule>,
    captions: Vec<CaptionRule>,
    seed: u64,
    max_top_logprobs: Option<u32>,
    outage_after: Option<usize>,
    calls: AtomicUsize,
}

impl MockVlm {
    pub fn new(rules: Vec<VlmRule>, captions: Vec<CaptionRule>, seed: u64) -> Self {
        Self {
            rules,
            captions,
            seed,
            max_top_logprobs: Some(MIN_TOP_LOGPROBS),
            outage_after: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_fixture(fixture: &MockFixture) -> Self {
        Self::new(fixture.vlm.clone(), fixture.captions.clone(), fixture.seed)
    }

    pub fn with_max_top_logprobs(mut self, n: Option<u32>) -> Self {
        self.max_top_logprobs = n;
        self
    }

    /// Every call after the first `n` fails transiently.
    pub fn with_outage_after(mut self, n: usize) -> Self {
        self.outage_after = Some(n);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn hashed_logit_gap(&self, image_id: &str, text: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image_id.as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        let digest = h.finalize();
        let u = u64::from_le_bytes(digest[..8].try_into().unwrap());
        (u as f64 / u64::MAX as f64) * 8.0 - 4.0
    }
}

/// Text between the template's "matches the description " and
/// ", please answer".
fn question_query(text: &str) -> &str {
    const HEAD: &str = "matches the description ";
    const TAIL: &str = ", please answer yes else no.";
    match (text.find(HEAD), text.rfind(TAIL)) {
        (Some(a), Some(b)) if a + HEAD.len() <= b => &text[a + HEAD.len()..b],
        _ => text,
    }
}

fn logit_reply(logit_yes: f64, logit_no: f64) -> ChatReply {
    let max = logit_yes.max(logit_no);
    let lse = max + ((logit_yes - max).exp() + (logit_no - max).exp()).ln();
    ChatReply {
        text: if logit_yes >= logit_no { "Yes" } else { "No" }.into(),
        top_logprobs: vec![
            TokenLogprob::new("Yes", logit_yes - lse),
            TokenLogprob::new("No", logit_no - lse),
        ],
    }
}

#[async_trait]
impl ChatBackend for MockVlm {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.outage_after.is_some_and(|limit| n >= limit) {
            return Err(BackendError::Transient("mock endpoint unavailable".into()));
        }
        let image_id = request.image().map(|i| i.image_id.as_str()).unwrap_or("");
        let text = request.user_text();

        if request.decoding.top_logprobs == 0 {
            let rule = self
                .captions
                .iter()
                .find(|r| prefixed(image_id, &r.image_prefix) && contains(&request.system_prompt, &r.attribute_contains));
            return match rule {
                Some(r) => Ok(ChatReply {
                    text: r.caption.clone(),
                    top_logprobs: Vec::new(),
                }),
                None => Err(BackendError::Fatal("mock VLM has no caption for this region".into())),
            };
        }

        let query = question_query(&text);
        let rule = self
            .rules
            .iter()
            .find(|r| prefixed(image_id, &r.image_prefix) && contains(query, &r.query_contains));
        match rule {
            Some(r) if r.fail => Err(BackendError::Fatal("mock VLM rejected the request".into())),
            Some(VlmRule { text: Some(t), .. }) => Ok(ChatReply {
                text: t.clone(),
                top_logprobs: Vec::new(),
            }),
            Some(VlmRule { logits: Some([y, n]), .. }) => Ok(logit_reply(*y, *n)),
            Some(VlmRule { p_yes: Some(p), .. }) => Ok(logit_reply(p.ln(), (1.0 - p).ln())),
            _ => Ok(logit_reply(self.hashed_logit_gap(image_id, &text), 0.0)),
        }
    }

    fn max_top_logprobs(&self) -> Option<u32> {
        self.max_top_logprobs
    }
}
