//! Browser bindings for three pipeline primitives: slice confidence from a
//! yes/no logit pair, slope trend analysis on a synthetic slice, and
//! Precision@k of a ranked slice against a ground-truth set.
//!
//! Results cross the boundary as JSON strings so the same functions run in
//! native tests.

use std::collections::BTreeSet;

use errslice_core::trend::{slope_trend_analysis, trend_series, TrendConfig, TrendMetric};
use errslice_core::{
    p_yes_from_logits, precision_at_k as core_precision_at_k, CandidateSlice, GroundTruthSlice, ScoredRegion,
    SliceCategory, TaskKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Baseline error rate of the synthetic slice when confidence has no effect.
pub const BASE_ERROR_RATE: f64 = 0.2;

#[wasm_bindgen]
pub fn slice_confidence(logit_yes: f64, logit_no: f64) -> f64 {
    p_yes_from_logits(logit_yes, logit_no)
}

#[derive(Serialize)]
struct TrendDemo {
    n: usize,
    dependence: f64,
    error_rate: f64,
    max_slope: Option<f64>,
    best_threshold: Option<f64>,
    is_systematic_error: bool,
    series: errslice_core::trend::TrendSeries,
}

/// `n` regions with confidence ~ Uniform(0, 1) and error probability
/// `(1 - d) * 0.2 + d * confidence`, analyzed with the default config.
#[wasm_bindgen]
pub fn trend_demo(n: u32, seed: u32, dependence: f64) -> String {
    let d = dependence.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let members = (0..n)
        .map(|i| {
            let confidence: f64 = rng.random();
            let p_error = (1.0 - d) * BASE_ERROR_RATE + d * confidence;
            ScoredRegion {
                region_id: format!("r-{i:05}"),
                confidence,
                is_model_error: rng.random::<f64>() < p_error,
                degraded: false,
            }
        })
        .collect::<Vec<_>>();
    let errors = members.iter().filter(|m| m.is_model_error).count();
    let slice = CandidateSlice::new("h-demo", members);
    let report = slope_trend_analysis(&slice, &TrendConfig::default());
    let demo = TrendDemo {
        n: n as usize,
        dependence: d,
        error_rate: if n == 0 { 0.0 } else { errors as f64 / f64::from(n) },
        max_slope: report.max_slope.is_finite().then_some(report.max_slope),
        best_threshold: report.best_threshold,
        is_systematic_error: report.is_systematic_error,
        series: trend_series(&report, TrendMetric::ErrorRate),
    };
    serde_json::to_string(&demo).expect("demo serializes")
}

fn ids(text: &str) -> Vec<String> {
    text.split([',', '\n', ' ', '\t'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Serialize)]
struct PrecisionDemo {
    precision: f64,
    k_used: usize,
    hits: Vec<String>,
}

/// Precision@k of `ranked` (best first) against the `ground_truth` ids.
/// Both lists are separated by commas, spaces or newlines. Repeated ranked
/// ids keep their first position.
#[wasm_bindgen]
pub fn precision_at_k(ground_truth: &str, ranked: &str, k: u32) -> String {
    let gt = GroundTruthSlice {
        gt_id: "gt".into(),
        name: "ground truth".into(),
        member_region_ids: ids(ground_truth).into_iter().collect::<BTreeSet<_>>(),
        category: SliceCategory::SemanticConfusion,
        task: TaskKind::Detection,
    };
    let mut seen = BTreeSet::new();
    let ranked: Vec<String> = ids(ranked).into_iter().filter(|r| seen.insert(r.clone())).collect();
    let members = ranked
        .iter()
        .enumerate()
        .map(|(i, r)| ScoredRegion {
            region_id: r.clone(),
            confidence: 1.0 - i as f64 / (ranked.len() as f64 + 1.0),
            is_model_error: gt.member_region_ids.contains(r),
            degraded: false,
        })
        .collect();
    let slice = CandidateSlice::new("h-demo", members);
    let (precision, k_used) = core_precision_at_k(&gt, &slice, k as usize);
    let hits = slice
        .top_k(k as usize)
        .iter()
        .filter(|m| gt.member_region_ids.contains(&m.region_id))
        .map(|m| m.region_id.clone())
        .collect();
    serde_json::to_string(&PrecisionDemo { precision, k_used, hits }).expect("demo serializes")
}
