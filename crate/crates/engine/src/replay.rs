//! Replays published per-slice Precision@10 tables through the evaluator.
//!
//! Each row becomes a synthetic GT slice of the printed size and one
//! candidate slice whose top 10 members hold `round(10 * p)` GT regions, so
//! the evaluator recomputes every row and the aggregates from scratch.

use std::collections::BTreeSet;
use std::path::Path;

use errslice_core::metrics::{best_slice_per_gt, EvalError};
use errslice_core::{
    CandidateSlice, EvaluationReport, GroundTruthSlice, Hypothesis, HypothesisOrigin, PromptType, ScoredRegion,
    SliceCategory, TaskKind,
};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub const REPLAY_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ReplayRow {
    pub gt_id: String,
    pub name: String,
    pub size: usize,
    pub category: SliceCategory,
    pub task: TaskKind,
    /// Empty when the table lists no prediction.
    pub best_query: String,
    pub precision_at_10: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("row {gt_id}: precision {p} is not a multiple of 1/10 in [0, 1]")]
    Precision { gt_id: String, p: f64 },
    #[error("row {gt_id}: {hits} hits need a GT slice of at least that size")]
    Size { gt_id: String, hits: usize },
    #[error("{0}")]
    Eval(#[from] EvalError),
}

pub fn read_rows(path: &Path) -> Result<Vec<ReplayRow>, ReplayError> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn parse_rows(text: &str) -> Result<Vec<ReplayRow>, ReplayError> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// GT slices, candidate slices and hypotheses reproducing the rows.
pub fn materialize(
    rows: &[ReplayRow],
) -> Result<(Vec<GroundTruthSlice>, Vec<CandidateSlice>, Vec<Hypothesis>), ReplayError> {
    let mut gts = Vec::new();
    let mut slices = Vec::new();
    let mut hypotheses = Vec::new();
    for row in rows {
        let scaled = row.precision_at_10 * REPLAY_K as f64;
        let hits = scaled.round();
        if !(0.0..=REPLAY_K as f64).contains(&hits) || (scaled - hits).abs() > 1e-9 {
            return Err(ReplayError::Precision {
                gt_id: row.gt_id.clone(),
                p: row.precision_at_10,
            });
        }
        let hits = hits as usize;
        if hits > row.size {
            return Err(ReplayError::Size {
                gt_id: row.gt_id.clone(),
                hits,
            });
        }
        let member = |j: usize| format!("{}/gt-{j:05}", row.gt_id);
        gts.push(GroundTruthSlice {
            gt_id: row.gt_id.clone(),
            name: row.name.clone(),
            member_region_ids: (0..row.size).map(member).collect::<BTreeSet<_>>(),
            category: row.category,
            task: row.task,
        });
        if row.best_query.trim().is_empty() {
            continue;
        }
        let id = format!("h-replay-{}", row.gt_id);
        // Top 10: hits GT regions then misses; below them more GT regions,
        // which must not count.
        let mut members = Vec::new();
        let mut rank = 0;
        let mut push = |region_id: String, error: bool| {
            members.push(ScoredRegion {
                region_id,
                confidence: 1.0 - rank as f64 * 0.01,
                is_model_error: error,
                degraded: false,
            });
            rank += 1;
        };
        for j in 0..hits {
            push(member(j), true);
        }
        for j in hits..REPLAY_K {
            push(format!("{}/other-{j:02}", row.gt_id), false);
        }
        for j in hits..row.size.min(hits + 5) {
            push(member(j), true);
        }
        slices.push(CandidateSlice::new(id.clone(), members));
        hypotheses.push(Hypothesis {
            hypothesis_id: id,
            query: row.best_query.clone(),
            origin: HypothesisOrigin::KnowledgeDriven,
            prompt_type: PromptType::Search,
            factor: String::new(),
            title: String::new(),
            description: String::new(),
            provenance: vec!["replay".into()],
        });
    }
    Ok((gts, slices, hypotheses))
}

pub fn replay(rows: &[ReplayRow]) -> Result<EvaluationReport, ReplayError> {
    let (gts, slices, hypotheses) = materialize(rows)?;
    Ok(best_slice_per_gt(&gts, &slices, &hypotheses, REPLAY_K)?)
}
