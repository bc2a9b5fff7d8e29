//! Chat-completions client for OpenAI-compatible serving endpoints.

use std::path::PathBuf;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use errslice_core::TokenLogprob;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatReply, ChatRequest, ImageRef, UserPart, MIN_TOP_LOGPROBS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL such as `http://localhost:8000/v1`.
    pub url: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    /// Declared logprob capability of the endpoint; `None` if unsupported.
    pub max_top_logprobs: Option<u32>,
    /// Local images up to this size are sent inline as base64.
    pub inline_image_limit_bytes: u64,
    /// Directory that relative image URIs are resolved against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key: None,
            timeout_secs: 120,
            max_top_logprobs: Some(MIN_TOP_LOGPROBS),
            inline_image_limit_bytes: 4 * 1024 * 1024,
            image_root: None,
        }
    }
}

pub struct OpenAiBackend {
    client: reqwest::Client,
    config: EndpointConfig,
}

impl OpenAiBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client, config })
    }

    fn endpoint(&self) -> String {
        let base = self.config.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    /// Inline data URL for small local files, the locator otherwise.
    async fn image_url(&self, image: &ImageRef) -> Result<String, BackendError> {
        let uri = image.uri.as_str();
        if uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:") {
            return Ok(uri.to_string());
        }
        let path = match &self.config.image_root {
            Some(root) => root.join(uri.trim_start_matches("file://")),
            None => PathBuf::from(uri.trim_start_matches("file://")),
        };
        let meta = tokio::fs::metadata(&path)
            .await
            .map_err(|e| BackendError::Fatal(format!("image {} unreadable: {e}", path.display())))?;
        if meta.len() > self.config.inline_image_limit_bytes {
            return Ok(format!("file://{}", path.display()));
        }
        let bytes = tokio::fs::read(&path)
            .await
            .map_err(|e| BackendError::Fatal(format!("image {} unreadable: {e}", path.display())))?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/jpeg",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    pub async fn request_body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        for part in &request.user_parts {
            match part {
                UserPart::Text(t) => content.push(json!({"type": "text", "text": t})),
                UserPart::Image(i) => content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": self.image_url(i).await?}
                })),
            }
        }
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": content}));
        let d = &request.decoding;
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": d.max_tokens,
            "temperature": d.temperature,
        });
        if let Some(seed) = d.seed {
            body["seed"] = json!(seed);
        }
        if d.top_logprobs > 0 {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(d.top_logprobs);
        }
        Ok(body)
    }
}

pub fn parse_reply(body: &Value) -> Result<ChatReply, BackendError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let top_logprobs = choice
        .pointer("/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|t| Some(TokenLogprob::new(t.get("token")?.as_str()?, t.get("logprob")?.as_f64()?)))
                .collect()
        })
        .unwrap_or_default();
    Ok(ChatReply { text, top_logprobs })
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let body = self.request_body(request).await?;
        let mut req = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(BackendError::Transient(format!("HTTP {status}: {}", snippet(&text))));
        }
        if status.is_client_error() {
            let lower = text.to_ascii_lowercase();
            if lower.contains("context_length") || lower.contains("maximum context") || lower.contains("too long") {
                return Err(BackendError::ContextOverflow(snippet(&text)));
            }
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", snippet(&text))));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
        parse_reply(&value)
    }

    fn max_top_logprobs(&self) -> Option<u32> {
        self.config.max_top_logprobs
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_with_logprobs() {
        let body = json!({
            "choices": [{
                "message": {"content": "Yes"},
                "logprobs": {"content": [{"token": "Yes", "logprob": -0.1,
                    "top_logprobs": [{"token": "Yes", "logprob": -0.1}, {"token": "No", "logprob": -2.4}]}]}
            }]
        });
        let r = parse_reply(&body).unwrap();
        assert_eq!(r.text, "Yes");
        assert_eq!(r.top_logprobs, vec![TokenLogprob::new("Yes", -0.1), TokenLogprob::new("No", -2.4)]);
    }

    #[test]
    fn reply_without_choices() {
        assert!(parse_reply(&json!({"error": "x"})).is_err());
    }
}
