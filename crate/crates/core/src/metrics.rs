//! Slice-level evaluation against ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CandidateSlice, EvaluationReport, GroundTruthSlice, Hypothesis, IdentificationScores,
    SemanticScores, SliceCategory, SliceEvaluation,
};
use crate::trend::TrendReport;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth slices to evaluate against")]
    NoGroundTruth,
}

/// `|GT ∩ top-k| / k_used` with `k_used = min(k, |slice|)`. An empty slice
/// (or k = 0) has `k_used = 0` and precision 0.
pub fn precision_at_k(gt: &GroundTruthSlice, slice: &CandidateSlice, k: usize) -> (f64, usize) {
    let top = slice.top_k(k);
    if top.is_empty() {
        return (0.0, 0);
    }
    let hits = top
        .iter()
        .filter(|m| gt.member_region_ids.contains(&m.region_id))
        .count();
    (hits as f64 / top.len() as f64, top.len())
}

/// Picks, for each GT slice, the candidate slice with the highest
/// precision@k (ties go to the smallest hypothesis id) and aggregates.
///
/// With no candidate slices at all the report has zero rows.
pub fn best_slice_per_gt(
    gts: &[GroundTruthSlice],
    slices: &[CandidateSlice],
    hypotheses: &[Hypothesis],
    k: usize,
) -> Result<EvaluationReport, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let queries: HashMap<&str, &str> = hypotheses
        .iter()
        .map(|h| (h.hypothesis_id.as_str(), h.query.as_str()))
        .collect();

    let mut rows = Vec::new();
    if !slices.is_empty() {
        for gt in gts {
            let mut best: Option<(&CandidateSlice, f64, usize)> = None;
            for s in slices {
                let (p, used) = precision_at_k(gt, s, k);
                let better = match best {
                    None => true,
                    Some((b, bp, _)) => p > bp || (p == bp && s.hypothesis_id < b.hypothesis_id),
                };
                if better {
                    best = Some((s, p, used));
                }
            }
            let (slice, precision, k_used) = best.expect("slices is non-empty");
            rows.push(SliceEvaluation {
                gt_id: gt.gt_id.clone(),
                name: gt.name.clone(),
                gt_size: gt.member_region_ids.len(),
                category: gt.category,
                best_hypothesis_id: Some(slice.hypothesis_id.clone()),
                best_query: queries.get(slice.hypothesis_id.as_str()).map(|q| q.to_string()),
                precision_at_k: precision,
                k_used,
            });
        }
    }
    Ok(summarize(k, rows))
}

/// Aggregates evaluation rows: arithmetic mean, perfect/valid counts and
/// per-category means with each GT slice weighted equally.
pub fn summarize(k: usize, rows: Vec<SliceEvaluation>) -> EvaluationReport {
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.precision_at_k).sum::<f64>() / rows.len() as f64
    };
    let mut by_cat: BTreeMap<SliceCategory, (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = by_cat.entry(r.category).or_default();
        e.0 += r.precision_at_k;
        e.1 += 1;
    }
    EvaluationReport {
        k,
        perfect_matches: rows.iter().filter(|r| r.precision_at_k == 1.0).count(),
        valid_matches: rows.iter().filter(|r| r.precision_at_k > 0.0).count(),
        per_slice: rows,
        mean_precision_at_k: mean,
        per_category_means: by_cat
            .into_iter()
            .map(|(c, (sum, n))| (c, sum / n as f64))
            .collect(),
        semantic: None,
        identification: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct JudgeDecision {
    pub predicted_slice_id: String,
    /// 1-based number from the judge's list; `None` is the no-match sentinel.
    pub matched_gt_index: Option<usize>,
    pub raw_reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
#[error("judge reply is not an integer: '{0}'")]
pub struct JudgeParseError(pub String);

/// Reads the judge's integer reply. `-1` means no match; integers outside
/// `1..=gt_count` also become no-match, with a warning.
pub fn parse_judge_reply(
    raw: &str,
    gt_count: usize,
) -> Result<(Option<usize>, Option<String>), JudgeParseError> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '.' || c.is_whitespace());
    let n: i64 = cleaned
        .parse()
        .map_err(|_| JudgeParseError(raw.trim().to_string()))?;
    if n == -1 {
        return Ok((None, None));
    }
    if n >= 1 && (n as usize) <= gt_count {
        Ok((Some(n as usize), None))
    } else {
        Ok((
            None,
            Some(format!("judge replied {n}, outside 1..={gt_count}; treated as no match")),
        ))
    }
}

/// Recall counts distinct matched GT indices over `gt_count`; precision is
/// the share of decisions with any match.
pub fn semantic_recall_precision(
    decisions: &[JudgeDecision],
    gt_count: usize,
) -> Result<(f64, f64), EvalError> {
    if gt_count == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let distinct: BTreeSet<usize> = decisions.iter().filter_map(|d| d.matched_gt_index).collect();
    let recall = distinct.len() as f64 / gt_count as f64;
    let precision = if decisions.is_empty() {
        0.0
    } else {
        decisions.iter().filter(|d| d.matched_gt_index.is_some()).count() as f64
            / decisions.len() as f64
    };
    Ok((recall, precision))
}

pub fn semantic_scores(
    decisions: &[JudgeDecision],
    gt_count: usize,
    excluded: usize,
) -> Result<SemanticScores, EvalError> {
    let (recall, precision) = semantic_recall_precision(decisions, gt_count)?;
    Ok(SemanticScores {
        recall,
        precision,
        judged: decisions.len(),
        excluded,
    })
}

/// Recall/precision/F1 of the systematic-error verdicts against GT
/// consistency. Reports without a consistency entry count as inconsistent.
/// Undefined ratios are 0.
pub fn identification_f1(
    reports: &[TrendReport],
    gt_consistency: &HashMap<String, bool>,
) -> IdentificationScores {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for r in reports {
        let truth = gt_consistency.get(&r.hypothesis_id).copied().unwrap_or(false);
        match (r.is_systematic_error, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let recall = ratio(tp, tp + fneg);
    let precision = ratio(tp, tp + fp);
    let f1 = if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    IdentificationScores {
        recall,
        precision,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScoredRegion, TaskKind};
    use crate::trend::TrendMethod;

    fn gt(id: &str, members: &[&str]) -> GroundTruthSlice {
        GroundTruthSlice {
            gt_id: id.into(),
            name: id.into(),
            member_region_ids: members.iter().map(|s| s.to_string()).collect(),
            category: SliceCategory::SemanticConfusion,
            task: TaskKind::Detection,
        }
    }

    fn slice(h: &str, ids: &[&str]) -> CandidateSlice {
        let n = ids.len() as f64;
        CandidateSlice::new(
            h,
            ids.iter()
                .enumerate()
                .map(|(i, id)| ScoredRegion {
                    region_id: id.to_string(),
                    confidence: 1.0 - (i as f64 + 1.0) / (n + 1.0),
                    is_model_error: true,
                    degraded: false,
                })
                .collect(),
        )
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:02}")).collect()
    }

    #[test]
    fn all_top_ten_in_gt() {
        let members = ids("a", 12);
        let refs: Vec<&str> = members.iter().map(String::as_str).collect();
        assert_eq!(precision_at_k(&gt("g", &refs), &slice("h", &refs), 10), (1.0, 10));
    }

    #[test]
    fn three_of_ten() {
        let members = ids("a", 20);
        let refs: Vec<&str> = members.iter().map(String::as_str).collect();
        let g = gt("g", &[refs[0], refs[4], refs[9], refs[15]]);
        assert_eq!(precision_at_k(&g, &slice("h", &refs), 10), (0.3, 10));
    }

    #[test]
    fn short_slice_uses_actual_size() {
        let g = gt("g", &["a", "b"]);
        assert_eq!(precision_at_k(&g, &slice("h", &["a", "x", "b"]), 10), (2.0 / 3.0, 3));
        assert_eq!(precision_at_k(&g, &slice("h", &[]), 10), (0.0, 0));
    }

    #[test]
    fn tie_goes_to_smallest_hypothesis_id() {
        let g = gt("g", &["a"]);
        let r = best_slice_per_gt(&[g], &[slice("h-b", &["a"]), slice("h-a", &["a"])], &[], 10).unwrap();
        assert_eq!(r.per_slice[0].best_hypothesis_id.as_deref(), Some("h-a"));
        assert_eq!(r.mean_precision_at_k, 1.0);
        assert_eq!(r.perfect_matches, 1);
    }

    #[test]
    fn empty_slices_give_zero_rows_and_empty_gt_is_error() {
        let r = best_slice_per_gt(&[gt("g", &["a"])], &[], &[], 10).unwrap();
        assert!(r.per_slice.is_empty());
        assert_eq!(r.mean_precision_at_k, 0.0);
        assert_eq!(best_slice_per_gt(&[], &[], &[], 10), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn judge_reply_parsing() {
        assert_eq!(parse_judge_reply("3", 5).unwrap(), (Some(3), None));
        assert_eq!(parse_judge_reply(" \"-1\" ", 5).unwrap(), (None, None));
        let (m, w) = parse_judge_reply("99", 5).unwrap();
        assert_eq!(m, None);
        assert!(w.unwrap().contains("99"));
        assert!(parse_judge_reply("pattern three", 5).is_err());
    }

    fn decision(m: Option<usize>) -> JudgeDecision {
        JudgeDecision {
            predicted_slice_id: "p".into(),
            matched_gt_index: m,
            raw_reply: String::new(),
            warning: None,
        }
    }

    #[test]
    fn semantic_counts_distinct_gt() {
        let d = [decision(Some(1)), decision(Some(1)), decision(Some(2))];
        assert_eq!(semantic_recall_precision(&d, 2).unwrap(), (1.0, 1.0));
        let d = [decision(None), decision(None)];
        assert_eq!(semantic_recall_precision(&d, 3).unwrap(), (0.0, 0.0));
        let d = [decision(Some(1)), decision(Some(1)), decision(Some(1))];
        assert_eq!(semantic_recall_precision(&d, 1).unwrap().0, 1.0);
        assert_eq!(semantic_recall_precision(&d, 0), Err(EvalError::NoGroundTruth));
    }

    fn report(id: &str, flagged: bool) -> TrendReport {
        TrendReport {
            hypothesis_id: id.into(),
            method: TrendMethod::SlopeTrend,
            max_slope: 0.0,
            best_threshold: None,
            slope_at_threshold: vec![],
            is_systematic_error: flagged,
            qualified: true,
            top_window_error_rate: None,
            mean_error_rate: None,
            degraded_fraction: 0.0,
            warnings: vec![],
        }
    }

    #[test]
    fn f1_from_confusion_counts() {
        // TP=8, FP=2, FN=2, TN=3
        let mut reports = Vec::new();
        let mut truth = HashMap::new();
        for i in 0..15 {
            let id = format!("h{i}");
            let (pred, t) = match i {
                0..=7 => (true, true),
                8..=9 => (true, false),
                10..=11 => (false, true),
                _ => (false, false),
            };
            reports.push(report(&id, pred));
            truth.insert(id, t);
        }
        let s = identification_f1(&reports, &truth);
        assert!((s.recall - 0.8).abs() < 1e-12);
        assert!((s.precision - 0.8).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_all_negative_predictions() {
        let truth = HashMap::from([("a".to_string(), true)]);
        let s = identification_f1(&[report("a", false)], &truth);
        assert_eq!((s.recall, s.precision, s.f1), (0.0, 0.0, 0.0));
    }
}
