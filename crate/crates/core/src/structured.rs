//! Recovery of structured documents from free-form model replies.
//!
//! Replies are stripped of code fences and surrounding prose, parsed, and
//! checked against one of a fixed set of schemas. Validation messages are
//! phrased so they can be fed back to the model on a retry.

use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::PromptType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaId {
    HypothesisDoc,
    KeywordList,
    ClusterDoc,
    QueryList,
    JudgeReply,
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HypothesisDoc => "hypothesis-doc",
            Self::KeywordList => "keyword-list",
            Self::ClusterDoc => "cluster-doc",
            Self::QueryList => "query-list",
            Self::JudgeReply => "judge-reply",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PromptEntry {
    pub prompt: String,
    pub prompt_type: PromptType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FailurePattern {
    pub title: String,
    pub description: String,
    pub prompts: Vec<PromptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct HypothesisDoc {
    pub title: Option<String>,
    /// Factors in model output order.
    pub factors: Vec<(String, Vec<FailurePattern>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuredDoc {
    Hypotheses(HypothesisDoc),
    Keywords(Vec<String>),
    /// `(category, values)` in model output order.
    Clusters(Vec<(String, Vec<String>)>),
    Queries(Vec<String>),
    Judge(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredError(pub String);

impl fmt::Display for StructuredError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for StructuredError {}

fn err<T>(msg: impl Into<String>) -> Result<T, StructuredError> {
    Err(StructuredError(msg.into()))
}

/// Inner text of the first fenced block, or the whole reply if unfenced.
pub fn strip_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw.trim();
    };
    let after = &raw[open + 3..];
    // Skip an info string such as `json`.
    let body = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => &after[nl + 1..],
        _ => after,
    };
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

/// First JSON value in the reply, ignoring fences and surrounding prose.
pub fn extract_json(raw: &str) -> Result<Value, StructuredError> {
    let text = strip_fences(raw);
    let Some(start) = text.find(['{', '[']) else {
        return err("reply contains no JSON object or array");
    };
    let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
    match stream.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => err(format!("reply is not valid JSON: {e}")),
        None => err("reply contains no JSON value"),
    }
}

fn string_list(v: &Value, path: &str) -> Result<Vec<String>, StructuredError> {
    let Some(items) = v.as_array() else {
        return err(format!("{path} must be an array of strings"));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, s)| match s.as_str() {
            Some(s) => Ok(s.to_string()),
            None => err(format!("{path}[{i}] must be a string")),
        })
        .collect()
}

fn parse_hypothesis_doc(v: &Value) -> Result<HypothesisDoc, StructuredError> {
    let Some(obj) = v.as_object() else {
        return err("top level must be a JSON object");
    };
    let Some(hyp) = obj.get("hypothesis") else {
        return err("missing required key \"hypothesis\"");
    };
    let Some(factors) = hyp.as_object() else {
        return err("\"hypothesis\" must be an object mapping factor names to lists");
    };
    let mut out = Vec::new();
    for (factor, patterns) in factors {
        let path = format!("hypothesis[\"{factor}\"]");
        let Some(patterns) = patterns.as_array() else {
            return err(format!("{path} must be an array of failure patterns"));
        };
        let mut parsed = Vec::new();
        for (i, p) in patterns.iter().enumerate() {
            let ppath = format!("{path}[{i}]");
            let text = |key: &str| p.get(key).and_then(Value::as_str).unwrap_or_default().to_string();
            let Some(prompts) = p.get("prompts").and_then(Value::as_array) else {
                return err(format!("{ppath}.prompts must be an array"));
            };
            let mut entries = Vec::new();
            for (j, e) in prompts.iter().enumerate() {
                let epath = format!("{ppath}.prompts[{j}]");
                let prompt = e.get("prompt").and_then(Value::as_str).map(str::trim);
                let Some(prompt) = prompt.filter(|s| !s.is_empty()) else {
                    return err(format!("{epath}.prompt must be a non-empty string"));
                };
                let ty = e.get("type").and_then(Value::as_str).and_then(PromptType::parse);
                let Some(prompt_type) = ty else {
                    return err(format!("{epath}.type must be \"cluster\" or \"search\""));
                };
                entries.push(PromptEntry {
                    prompt: prompt.to_string(),
                    prompt_type,
                });
            }
            parsed.push(FailurePattern {
                title: text("title"),
                description: text("description"),
                prompts: entries,
            });
        }
        out.push((factor.clone(), parsed));
    }
    Ok(HypothesisDoc {
        title: obj.get("title").and_then(Value::as_str).map(String::from),
        factors: out,
    })
}

fn parse_keywords(raw: &str) -> Result<Vec<String>, StructuredError> {
    if let Ok(v) = extract_json(raw) {
        if v.is_array() {
            return string_list(&v, "keyword list");
        }
    }
    let words: Vec<String> = strip_fences(raw)
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(['-', '*'])
                .trim()
                .trim_matches(|c| c == '\'' || c == '"' || c == '.')
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect();
    if words.is_empty() {
        return err("reply is empty; expected a keyword");
    }
    Ok(words)
}

fn parse_clusters(v: &Value) -> Result<Vec<(String, Vec<String>)>, StructuredError> {
    let Some(obj) = v.as_object() else {
        return err("expected a JSON object mapping category names to keyword lists");
    };
    obj.iter()
        .map(|(k, vals)| Ok((k.clone(), string_list(vals, &format!("[\"{k}\"]"))?)))
        .collect()
}

fn parse_queries(v: &Value) -> Result<Vec<String>, StructuredError> {
    match v.get("results") {
        Some(r) => string_list(r, "results"),
        None => err("missing required key \"results\""),
    }
}

fn parse_judge(raw: &str) -> Result<i64, StructuredError> {
    let cleaned = strip_fences(raw)
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace());
    cleaned
        .parse()
        .map_err(|_| StructuredError(format!("expected only an integer, got '{}'", raw.trim())))
}

pub fn parse_structured(schema: SchemaId, raw: &str) -> Result<StructuredDoc, StructuredError> {
    match schema {
        SchemaId::HypothesisDoc => Ok(StructuredDoc::Hypotheses(parse_hypothesis_doc(&extract_json(raw)?)?)),
        SchemaId::KeywordList => Ok(StructuredDoc::Keywords(parse_keywords(raw)?)),
        SchemaId::ClusterDoc => Ok(StructuredDoc::Clusters(parse_clusters(&extract_json(raw)?)?)),
        SchemaId::QueryList => Ok(StructuredDoc::Queries(parse_queries(&extract_json(raw)?)?)),
        SchemaId::JudgeReply => Ok(StructuredDoc::Judge(parse_judge(raw)?)),
    }
}
