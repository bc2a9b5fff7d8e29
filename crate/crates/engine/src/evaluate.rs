//! Precision@k against ground truth, the semantic judge, and report exports.

use std::collections::HashMap;

use errslice_core::documents::{RunDocument, SCHEMA_VERSION};
use errslice_core::metrics::{
    best_slice_per_gt, identification_f1, parse_judge_reply, semantic_scores, EvalError, JudgeDecision,
};
use errslice_core::prompts::{judge_user, SEMANTIC_JUDGE};
use errslice_core::structured::{SchemaId, StructuredDoc};
use errslice_core::trend::{analyze, TrendConfig, TrendMethod, TrendReport};
use errslice_core::{
    CandidateSlice, EvaluationReport, GroundTruthSlice, Hypothesis, IdentificationScores, Manifest,
};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Decoding, Gateway, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvaluationDocument {
    pub schema_version: u32,
    pub run_id: String,
    pub report: EvaluationReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_decisions: Vec<JudgeDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_errors: Vec<String>,
}

/// Asks the judge which numbered GT pattern matches the hypothesis.
pub async fn judge_semantic_match(
    gateway: &Gateway,
    predicted: &Hypothesis,
    gt_names: &[String],
) -> Result<JudgeDecision, GatewayError> {
    let request = ChatRequest::text(
        SEMANTIC_JUDGE.text,
        judge_user(gt_names, &predicted.query),
        Decoding::greedy(8, gateway.config().seed),
    );
    let reply = gateway.complete_structured(&request, SchemaId::JudgeReply).await?;
    let StructuredDoc::Judge(n) = reply.doc else {
        return Err(GatewayError::Unreadable(reply.raw));
    };
    let (matched_gt_index, warning) = parse_judge_reply(&n.to_string(), gt_names.len())
        .map_err(|e| GatewayError::Unreadable(e.to_string()))?;
    Ok(JudgeDecision {
        predicted_slice_id: predicted.hypothesis_id.clone(),
        matched_gt_index,
        raw_reply: reply.raw,
        warning,
    })
}

/// Precision@k per GT slice over the run's slices and, when a judge gateway
/// is given, semantic recall/precision and identification scores. Judge
/// failures are excluded from the aggregates and listed.
pub async fn evaluate_run(
    gts: &[GroundTruthSlice],
    run: &RunDocument,
    k: usize,
    judge: Option<&Gateway>,
) -> Result<EvaluationDocument, EvalError> {
    let mut report = best_slice_per_gt(gts, &run.slices(), &run.hypotheses, k)?;
    let mut decisions = Vec::new();
    let mut errors = Vec::new();
    if let Some(gateway) = judge {
        let names: Vec<String> = gts.iter().map(|g| g.name.clone()).collect();
        let scored: Vec<&Hypothesis> = run
            .hypotheses
            .iter()
            .filter(|h| run.result(&h.hypothesis_id).is_some())
            .collect();
        for h in scored {
            match judge_semantic_match(gateway, h, &names).await {
                Ok(d) => decisions.push(d),
                Err(e) => errors.push(format!("{}: {e}", h.hypothesis_id)),
            }
        }
        report.semantic = Some(semantic_scores(&decisions, names.len(), errors.len())?);
        let consistency = judge_consistency(&decisions);
        let judged: Vec<_> = run
            .reports()
            .into_iter()
            .filter(|r| consistency.contains_key(&r.hypothesis_id))
            .collect();
        report.identification = Some(identification_f1(&judged, &consistency));
    }
    Ok(EvaluationDocument {
        schema_version: SCHEMA_VERSION,
        run_id: run.run_id.clone(),
        report,
        judge_decisions: decisions,
        judge_errors: errors,
    })
}

/// Precision@k from the manifest's own GT slices.
pub async fn evaluate_manifest_run(
    manifest: &Manifest,
    run: &RunDocument,
    k: usize,
    judge: Option<&Gateway>,
) -> Result<EvaluationDocument, EvalError> {
    evaluate_run(&manifest.gt_slices, run, k, judge).await
}

/// Tab-separated table with one row per GT slice.
pub fn flat_table(report: &EvaluationReport) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record(["gt_id", "name", "size", "best_query", "precision_at_k"])
        .expect("in-memory write");
    for row in &report.per_slice {
        w.write_record([
            row.gt_id.as_str(),
            row.name.as_str(),
            &row.gt_size.to_string(),
            row.best_query.as_deref().unwrap_or(""),
            &row.precision_at_k.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategoryBar {
    pub category: String,
    pub mean_precision_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategoryChart {
    pub k: usize,
    pub bars: Vec<CategoryBar>,
}

pub fn category_chart(report: &EvaluationReport) -> CategoryChart {
    CategoryChart {
        k: report.k,
        bars: report
            .per_category_means
            .iter()
            .map(|(c, m)| CategoryBar {
                category: c.to_string(),
                mean_precision_at_k: *m,
            })
            .collect(),
    }
}

/// One point of a threshold sweep: each method gets its own threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SweepPoint {
    pub slope_threshold: f64,
    pub error_rate_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub slope: IdentificationScores,
    pub baseline: IdentificationScores,
}

/// Ten shared threshold values 0.05..=0.5, applied to both methods.
pub fn default_sweep() -> Vec<SweepPoint> {
    (1..=10)
        .map(|i| {
            let t = f64::from(i) / 20.0;
            SweepPoint {
                slope_threshold: t,
                error_rate_threshold: t,
            }
        })
        .collect()
}

/// Re-analyzes every scored slice of the run with both methods at each
/// point and scores the verdicts against `consistency`. Only hypotheses
/// with a consistency entry are counted.
pub fn threshold_sweep(
    run: &RunDocument,
    consistency: &HashMap<String, bool>,
    points: &[SweepPoint],
) -> Vec<SweepRow> {
    let slices: Vec<CandidateSlice> = run
        .slices()
        .into_iter()
        .filter(|s| consistency.contains_key(&s.hypothesis_id))
        .collect();
    points
        .iter()
        .map(|&point| {
            let trend = TrendConfig {
                slope_threshold: point.slope_threshold,
                error_rate_threshold: point.error_rate_threshold,
                ..run.config.trend.clone()
            };
            let reports = |method| -> Vec<TrendReport> {
                slices.iter().map(|s| analyze(s, &trend, method, None)).collect()
            };
            SweepRow {
                point,
                slope: identification_f1(&reports(TrendMethod::SlopeTrend), consistency),
                baseline: identification_f1(&reports(TrendMethod::ErrorRateThreshold), consistency),
            }
        })
        .collect()
}

/// Consistency map from judge decisions: a hypothesis is GT-consistent when
/// the judge matched it to some GT slice.
pub fn judge_consistency(decisions: &[JudgeDecision]) -> HashMap<String, bool> {
    decisions
        .iter()
        .map(|d| (d.predicted_slice_id.clone(), d.matched_gt_index.is_some()))
        .collect()
}
