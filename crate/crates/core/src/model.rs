//! Domain types shared by every stage of the discovery pipeline.
//!
//! Everything here is plain data. Identifiers are supplied by the caller
//! (manifests carry stable ids) and timestamps never participate in equality.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ImageRecord {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub dataset_split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GroundingKind {
    Box,
    Point,
    MaskRef,
}

/// Spatial grounding of a region in original-image pixel coordinates.
///
/// Kept flat (rather than an enum with payloads) so that manifests with
/// missing or surplus fields still parse and can be reported by
/// [`crate::manifest::validate`] instead of failing deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Grounding {
    pub kind: GroundingKind,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_uri: Option<String>,
}

impl Grounding {
    pub fn bbox(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            kind: GroundingKind::Box,
            bbox: Some([x_min, y_min, x_max, y_max]),
            point: None,
            mask_uri: None,
        }
    }

    pub fn point(x: f64, y: f64) -> Self {
        Self {
            kind: GroundingKind::Point,
            bbox: None,
            point: Some([x, y]),
            mask_uri: None,
        }
    }

    pub fn mask(mask_uri: impl Into<String>, bbox: Option<[f64; 4]>) -> Self {
        Self {
            kind: GroundingKind::MaskRef,
            bbox,
            point: None,
            mask_uri: Some(mask_uri.into()),
        }
    }

    /// Box used for box-style prompts. Mask references use their bounding box.
    pub fn prompt_box(&self) -> Option<[f64; 4]> {
        match self.kind {
            GroundingKind::Box | GroundingKind::MaskRef => self.bbox,
            GroundingKind::Point => None,
        }
    }

    /// Representative point: the point itself, or the centre of the box.
    pub fn center_point(&self) -> Option<[f64; 2]> {
        match (self.point, self.bbox) {
            (Some(p), _) => Some(p),
            (None, Some([x0, y0, x1, y1])) => Some([(x0 + x1) / 2.0, (y0 + y1) / 2.0]),
            _ => None,
        }
    }

    pub fn has_positive_area(&self) -> bool {
        match self.prompt_box() {
            Some([x0, y0, x1, y1]) => x0 < x1 && y0 < y1,
            None => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    FalseNegative,
    FalsePositive,
    Misclassification,
    None,
}

impl ErrorKind {
    pub fn is_error(self) -> bool {
        self != ErrorKind::None
    }
}

/// One instance of the target class, either a model error (FN/FP/...) or a
/// correctly handled instance (`error_kind = none`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorRegion {
    pub region_id: String,
    pub image_id: String,
    pub grounding: Grounding,
    pub error_kind: ErrorKind,
    pub class_label: String,
    pub is_model_error: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisOrigin {
    KnowledgeDriven,
    DataDriven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PromptType {
    Search,
    Cluster,
}

impl PromptType {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "search" => Some(Self::Search),
            "cluster" => Some(Self::Cluster),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Hypothesis {
    pub hypothesis_id: String,
    pub query: String,
    pub origin: HypothesisOrigin,
    pub prompt_type: PromptType,
    #[serde(default)]
    pub factor: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl Hypothesis {
    pub fn normalized_query(&self) -> String {
        normalize_query(&self.query)
    }
}

/// Case-fold and collapse whitespace. The only normalization applied before
/// hypothesis deduplication.
pub fn normalize_query(query: &str) -> String {
    query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Drop hypotheses whose normalized query was already seen; first one wins.
pub fn dedup_hypotheses(hypotheses: Vec<Hypothesis>) -> Vec<Hypothesis> {
    let mut seen = BTreeSet::new();
    hypotheses
        .into_iter()
        .filter(|h| seen.insert(h.normalized_query()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ScoredRegion {
    pub region_id: String,
    pub confidence: f64,
    pub is_model_error: bool,
    /// Confidence came from the text fallback rather than logprobs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

/// Ranking order of slice members: confidence descending, then region id
/// ascending.
pub fn rank_order(a: &ScoredRegion, b: &ScoredRegion) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.region_id.cmp(&b.region_id))
}

/// A hypothesis together with every scored region of the target class.
/// Members are kept in [`rank_order`], including after deserialization.
#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(from = "RawCandidateSlice")]
pub struct CandidateSlice {
    pub hypothesis_id: String,
    members: Vec<ScoredRegion>,
    /// Regions that could not be scored (gateway failures).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unscored: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

impl CandidateSlice {
    pub fn new(hypothesis_id: impl Into<String>, mut members: Vec<ScoredRegion>) -> Self {
        members.sort_by(rank_order);
        Self {
            hypothesis_id: hypothesis_id.into(),
            members,
            unscored: Vec::new(),
            created_at: None,
        }
    }

    pub fn with_timestamp(mut self, at: DateTime<Utc>) -> Self {
        self.created_at = Some(at);
        self
    }

    pub fn members(&self) -> &[ScoredRegion] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_partial(&self) -> bool {
        !self.unscored.is_empty()
    }

    pub fn insert(&mut self, member: ScoredRegion) {
        let at = self
            .members
            .partition_point(|m| rank_order(m, &member) == Ordering::Less);
        self.members.insert(at, member);
    }

    /// First `min(k, len)` members.
    pub fn top_k(&self, k: usize) -> &[ScoredRegion] {
        &self.members[..k.min(self.members.len())]
    }

}

#[derive(Deserialize, JsonSchema)]
struct RawCandidateSlice {
    hypothesis_id: String,
    members: Vec<ScoredRegion>,
    #[serde(default)]
    unscored: Vec<String>,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
}

impl From<RawCandidateSlice> for CandidateSlice {
    fn from(raw: RawCandidateSlice) -> Self {
        let mut slice = CandidateSlice::new(raw.hypothesis_id, raw.members);
        slice.unscored = raw.unscored;
        slice.created_at = raw.created_at;
        slice
    }
}

impl PartialEq for CandidateSlice {
    fn eq(&self, other: &Self) -> bool {
        self.hypothesis_id == other.hypothesis_id
            && self.members == other.members
            && self.unscored == other.unscored
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SliceCategory {
    SemanticConfusion,
    ContextualInterference,
    IntrinsicVisualDifficulty,
}

impl fmt::Display for SliceCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SemanticConfusion => "semantic_confusion",
            Self::ContextualInterference => "contextual_interference",
            Self::IntrinsicVisualDifficulty => "intrinsic_visual_difficulty",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct GroundTruthSlice {
    pub gt_id: String,
    pub name: String,
    pub member_region_ids: BTreeSet<String>,
    pub category: SliceCategory,
    pub task: TaskKind,
}

/// One row of an evaluation: the best candidate slice for a GT slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SliceEvaluation {
    pub gt_id: String,
    pub name: String,
    pub gt_size: usize,
    pub category: SliceCategory,
    pub best_hypothesis_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_query: Option<String>,
    pub precision_at_k: f64,
    pub k_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SemanticScores {
    pub recall: f64,
    pub precision: f64,
    pub judged: usize,
    /// Decisions dropped because the judge reply could not be parsed.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IdentificationScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvaluationReport {
    pub k: usize,
    pub per_slice: Vec<SliceEvaluation>,
    pub mean_precision_at_k: f64,
    pub perfect_matches: usize,
    pub valid_matches: usize,
    pub per_category_means: BTreeMap<SliceCategory, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification: Option<IdentificationScores>,
}
