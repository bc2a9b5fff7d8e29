//! Slice confidence: the yes-probability of a grounded yes/no question,
//! renormalized over the two answer tokens.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability assigned to the text fallback answer (`yes` -> 1 - eps).
pub const FALLBACK_EPSILON: f64 = 1e-3;

/// Confidences are kept strictly inside (0, 1).
const CONFIDENCE_FLOOR: f64 = f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct YesNoVerdict {
    pub p_yes: f64,
    pub logit_yes: f64,
    pub logit_no: f64,
    pub token_variants_matched: Vec<String>,
    /// Set when the verdict was read from the answer text instead of logprobs.
    #[serde(default)]
    pub degraded: bool,
}

impl YesNoVerdict {
    pub fn from_logits(logit_yes: f64, logit_no: f64) -> Self {
        Self {
            p_yes: p_yes_from_logits(logit_yes, logit_no),
            logit_yes,
            logit_no,
            token_variants_matched: Vec::new(),
            degraded: false,
        }
    }

    pub fn p_no(&self) -> f64 {
        1.0 - self.p_yes
    }
}

/// Two-way softmax `exp(y) / (exp(y) + exp(n))`, evaluated as a logistic of
/// the difference so it never overflows. Clamped into the open unit interval.
pub fn p_yes_from_logits(logit_yes: f64, logit_no: f64) -> f64 {
    let d = logit_yes - logit_no;
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    p.clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)
}

/// Surface forms of the answer tokens, per model profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AnswerVariants {
    pub yes: Vec<String>,
    pub no: Vec<String>,
}

impl Default for AnswerVariants {
    fn default() -> Self {
        Self {
            yes: ["yes", "Yes", " yes", " Yes"].map(String::from).to_vec(),
            no: ["no", "No", " no", " No"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VerdictError {
    #[error("answer text '{0}' is neither yes nor no")]
    UnreadableAnswer(String),
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Builds a verdict from the top-logprobs at the first generated position.
///
/// Probability mass is summed over every listed variant of each answer
/// before the pairwise renormalization. If only one family appears, the
/// other family's mass is bounded by the smallest returned logprob and that
/// bound is used. Returns `None` when neither family is present.
pub fn verdict_from_top_logprobs(
    top: &[TokenLogprob],
    variants: &AnswerVariants,
) -> Option<YesNoVerdict> {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    let mut matched = Vec::new();
    for t in top {
        if variants.yes.contains(&t.token) {
            yes.push(t.logprob);
            matched.push(t.token.clone());
        } else if variants.no.contains(&t.token) {
            no.push(t.logprob);
            matched.push(t.token.clone());
        }
    }
    if yes.is_empty() && no.is_empty() {
        return None;
    }
    let floor = top
        .iter()
        .map(|t| t.logprob)
        .fold(f64::INFINITY, f64::min);
    let logit_yes = if yes.is_empty() { floor } else { log_sum_exp(&yes) };
    let logit_no = if no.is_empty() { floor } else { log_sum_exp(&no) };
    Some(YesNoVerdict {
        token_variants_matched: matched,
        ..YesNoVerdict::from_logits(logit_yes, logit_no)
    })
}

/// Degraded verdict read from the generated answer text.
pub fn verdict_from_text(answer: &str) -> Result<YesNoVerdict, VerdictError> {
    let word: String = answer
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    let p = match word.as_str() {
        "yes" => 1.0 - FALLBACK_EPSILON,
        "no" => FALLBACK_EPSILON,
        _ => return Err(VerdictError::UnreadableAnswer(answer.trim().to_string())),
    };
    Ok(YesNoVerdict {
        p_yes: p,
        logit_yes: p.ln(),
        logit_no: (1.0 - p).ln(),
        token_variants_matched: vec![word],
        degraded: true,
    })
}
