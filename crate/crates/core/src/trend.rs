//! Systematic-error identification.
//!
//! A sliding confidence threshold selects nested windows of the ranked slice
//! (members with confidence >= tau). Each window is cut into equal-count bins
//! by confidence rank, and error rate is regressed on mean confidence over
//! the bins. The largest slope over all qualifying windows decides whether
//! the slice is a systematic error. The error-rate threshold baseline is
//! provided alongside for comparison.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CandidateSlice, ScoredRegion};

/// Verdicts are flagged unreliable above this share of degraded confidences.
pub const DEGRADED_WARNING_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct TrendConfig {
    pub threshold_grid: Vec<f64>,
    pub min_window_size: usize,
    pub bin_count: usize,
    pub slope_threshold: f64,
    pub error_rate_threshold: f64,
    /// Windows whose binomial slope standard error exceeds this are skipped.
    pub max_slope_stderr: f64,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            threshold_grid: (0..=18).map(|i| i as f64 * 0.05).collect(),
            min_window_size: 30,
            bin_count: 10,
            slope_threshold: 0.5,
            error_rate_threshold: 0.1,
            max_slope_stderr: 0.05,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrendConfigError {
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("threshold grid must be strictly ascending within [0, 1)")]
    BadGrid,
    #[error("bin_count must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("min_window_size ({min_window_size}) must be at least bin_count ({bin_count})")]
    WindowSmallerThanBins {
        min_window_size: usize,
        bin_count: usize,
    },
    #[error("max_slope_stderr must be positive")]
    BadStderr,
}

impl TrendConfig {
    pub fn validate(&self) -> Result<(), TrendConfigError> {
        if self.threshold_grid.is_empty() {
            return Err(TrendConfigError::EmptyGrid);
        }
        let in_range = self.threshold_grid.iter().all(|t| (0.0..1.0).contains(t));
        let ascending = self.threshold_grid.windows(2).all(|w| w[0] < w[1]);
        if !in_range || !ascending {
            return Err(TrendConfigError::BadGrid);
        }
        if self.bin_count < 2 {
            return Err(TrendConfigError::TooFewBins(self.bin_count));
        }
        if self.min_window_size < self.bin_count {
            return Err(TrendConfigError::WindowSmallerThanBins {
                min_window_size: self.min_window_size,
                bin_count: self.bin_count,
            });
        }
        if !(self.max_slope_stderr > 0.0) {
            return Err(TrendConfigError::BadStderr);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TrendMethod {
    SlopeTrend,
    ErrorRateThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrendBin {
    pub mean_confidence: f64,
    pub error_rate: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WindowFit {
    pub threshold: f64,
    pub window_size: usize,
    pub slope: f64,
    pub intercept: f64,
    /// `None` for zero-leverage windows (all bin means equal).
    pub stderr: Option<f64>,
    pub bins: Vec<TrendBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrendReport {
    pub hypothesis_id: String,
    pub method: TrendMethod,
    /// Negative infinity (serialized as null) when no window qualified.
    #[serde(with = "crate::serde_ext::finite_or_null")]
    #[schemars(with = "Option<f64>")]
    pub max_slope: f64,
    pub best_threshold: Option<f64>,
    pub slope_at_threshold: Vec<WindowFit>,
    pub is_systematic_error: bool,
    pub qualified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_window_error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_error_rate: Option<f64>,
    #[serde(default)]
    pub degraded_fraction: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TrendReport {
    pub fn best_window(&self) -> Option<&WindowFit> {
        let t = self.best_threshold?;
        self.slope_at_threshold.iter().find(|w| w.threshold == t)
    }
}

/// Ordinary least squares over points. Returns `(slope, intercept)`; a
/// zero-spread abscissa yields slope 0 through the mean.
pub fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    if zero_spread(points.iter().map(|p| p.0)) {
        return (0.0, my);
    }
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn zero_spread(xs: impl Iterator<Item = f64>) -> bool {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    hi - lo <= 1e-12 * hi.abs().max(1.0)
}

/// Equal-count bins over members in ascending confidence; the last bin
/// absorbs the remainder.
fn bin_window(window_desc: &[ScoredRegion], bin_count: usize) -> Vec<TrendBin> {
    let n = window_desc.len();
    let size = n / bin_count;
    let ascending: Vec<&ScoredRegion> = window_desc.iter().rev().collect();
    (0..bin_count)
        .map(|b| {
            let lo = b * size;
            let hi = if b + 1 == bin_count { n } else { lo + size };
            let chunk = &ascending[lo..hi];
            let count = chunk.len();
            TrendBin {
                mean_confidence: chunk.iter().map(|m| m.confidence).sum::<f64>() / count as f64,
                error_rate: chunk.iter().filter(|m| m.is_model_error).count() as f64
                    / count as f64,
                count,
            }
        })
        .collect()
}

fn fit_window(threshold: f64, window: &[ScoredRegion], config: &TrendConfig) -> Option<WindowFit> {
    let bins = bin_window(window, config.bin_count);
    let points: Vec<(f64, f64)> = bins.iter().map(|b| (b.mean_confidence, b.error_rate)).collect();
    let n = window.len() as f64;
    let (slope, intercept, stderr) = if zero_spread(points.iter().map(|p| p.0)) {
        let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        (0.0, my, None)
    } else {
        let (slope, intercept) = ols(&points);
        let mean_x = bins.iter().map(|b| b.mean_confidence * b.count as f64).sum::<f64>() / n;
        let leverage: f64 = bins
            .iter()
            .map(|b| b.count as f64 * (b.mean_confidence - mean_x).powi(2))
            .sum();
        let p = window.iter().filter(|m| m.is_model_error).count() as f64 / n;
        let se = (p * (1.0 - p) / leverage).sqrt();
        if se > config.max_slope_stderr {
            return None;
        }
        (slope, intercept, Some(se))
    };
    Some(WindowFit {
        threshold,
        window_size: window.len(),
        slope,
        intercept,
        stderr,
        bins,
    })
}

/// Prefix of the ranked members with confidence >= `threshold`.
fn window(members: &[ScoredRegion], threshold: f64) -> &[ScoredRegion] {
    let n = members.partition_point(|m| m.confidence >= threshold);
    &members[..n]
}

fn degraded_fraction(members: &[ScoredRegion]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    members.iter().filter(|m| m.degraded).count() as f64 / members.len() as f64
}

fn degraded_warnings(fraction: f64) -> Vec<String> {
    if fraction > DEGRADED_WARNING_FRACTION {
        vec![format!(
            "{:.1}% of confidences came from the text fallback; slope estimates are unreliable",
            fraction * 100.0
        )]
    } else {
        Vec::new()
    }
}

/// Error rate over all members, the population baseline.
pub fn error_rate(members: &[ScoredRegion]) -> Option<f64> {
    if members.is_empty() {
        None
    } else {
        Some(members.iter().filter(|m| m.is_model_error).count() as f64 / members.len() as f64)
    }
}

pub fn slope_trend_analysis(slice: &CandidateSlice, config: &TrendConfig) -> TrendReport {
    let members = slice.members();
    let fits: Vec<WindowFit> = config
        .threshold_grid
        .iter()
        .filter_map(|&tau| {
            let w = window(members, tau);
            if w.len() < config.min_window_size {
                return None;
            }
            fit_window(tau, w, config)
        })
        .collect();

    let best = fits
        .iter()
        .fold(None::<&WindowFit>, |best, f| match best {
            Some(b) if b.slope >= f.slope => Some(b),
            _ => Some(f),
        });
    let qualified = best.is_some();
    let max_slope = best.map_or(f64::NEG_INFINITY, |b| b.slope);
    let fraction = degraded_fraction(members);
    let mut warnings = degraded_warnings(fraction);
    if !qualified {
        warnings.push("no threshold window qualified".into());
    }
    TrendReport {
        hypothesis_id: slice.hypothesis_id.clone(),
        method: TrendMethod::SlopeTrend,
        max_slope,
        best_threshold: best.map(|b| b.threshold),
        is_systematic_error: qualified && max_slope > config.slope_threshold,
        qualified,
        slope_at_threshold: fits,
        top_window_error_rate: None,
        mean_error_rate: error_rate(members),
        degraded_fraction: fraction,
        warnings,
    }
}

/// Flags a slice when the error rate of its highest qualifying window
/// exceeds the population mean by more than `error_rate_threshold`.
///
/// `mean_error_rate` defaults to the error rate over all slice members,
/// which is the whole scored population of the target class.
pub fn error_rate_threshold_baseline(
    slice: &CandidateSlice,
    config: &TrendConfig,
    mean_error_rate: Option<f64>,
) -> TrendReport {
    let members = slice.members();
    let mean = mean_error_rate.or_else(|| error_rate(members));
    let top = config.threshold_grid.iter().rev().find_map(|&tau| {
        let w = window(members, tau);
        (w.len() >= config.min_window_size && !w.is_empty()).then(|| (tau, error_rate(w).unwrap()))
    });
    let qualified = top.is_some() && mean.is_some();
    let is_systematic_error = match (top, mean) {
        (Some((_, rate)), Some(mean)) => rate > mean + config.error_rate_threshold,
        _ => false,
    };
    let fraction = degraded_fraction(members);
    let mut warnings = degraded_warnings(fraction);
    if !qualified {
        warnings.push("no threshold window qualified".into());
    }
    TrendReport {
        hypothesis_id: slice.hypothesis_id.clone(),
        method: TrendMethod::ErrorRateThreshold,
        max_slope: f64::NEG_INFINITY,
        best_threshold: top.map(|t| t.0),
        slope_at_threshold: Vec::new(),
        is_systematic_error,
        qualified,
        top_window_error_rate: top.map(|t| t.1),
        mean_error_rate: mean,
        degraded_fraction: fraction,
        warnings,
    }
}

pub fn analyze(
    slice: &CandidateSlice,
    config: &TrendConfig,
    method: TrendMethod,
    mean_error_rate: Option<f64>,
) -> TrendReport {
    match method {
        TrendMethod::SlopeTrend => slope_trend_analysis(slice, config),
        TrendMethod::ErrorRateThreshold => error_rate_threshold_baseline(slice, config, mean_error_rate),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TrendMetric {
    ErrorRate,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SeriesWindow {
    pub threshold: f64,
    pub window_size: usize,
    pub slope: f64,
    pub intercept: f64,
    /// `[mean_confidence, metric]` per bin.
    pub points: Vec<[f64; 2]>,
}

/// Chart data for one report under either metric. Accuracy is the pointwise
/// complement of error rate, so its slopes carry the opposite sign; the
/// verdict is copied from the report and never recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TrendSeries {
    pub hypothesis_id: String,
    pub metric: TrendMetric,
    pub method: TrendMethod,
    pub windows: Vec<SeriesWindow>,
    pub best_threshold: Option<f64>,
    /// Slope of the maximizing window in the chosen metric.
    #[serde(with = "crate::serde_ext::finite_or_null")]
    #[schemars(with = "Option<f64>")]
    pub trend_slope: f64,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    #[schemars(with = "Option<f64>")]
    pub max_slope: f64,
    pub is_systematic_error: bool,
}

pub fn trend_series(report: &TrendReport, metric: TrendMetric) -> TrendSeries {
    let flip = |y: f64| match metric {
        TrendMetric::ErrorRate => y,
        TrendMetric::Accuracy => 1.0 - y,
    };
    let sign = match metric {
        TrendMetric::ErrorRate => 1.0,
        TrendMetric::Accuracy => -1.0,
    };
    let windows = report
        .slope_at_threshold
        .iter()
        .map(|w| SeriesWindow {
            threshold: w.threshold,
            window_size: w.window_size,
            slope: sign * w.slope,
            intercept: flip(w.intercept),
            points: w
                .bins
                .iter()
                .map(|b| [b.mean_confidence, flip(b.error_rate)])
                .collect(),
        })
        .collect();
    TrendSeries {
        hypothesis_id: report.hypothesis_id.clone(),
        metric,
        method: report.method,
        windows,
        best_threshold: report.best_threshold,
        trend_slope: if report.max_slope.is_finite() {
            sign * report.max_slope
        } else {
            report.max_slope
        },
        max_slope: report.max_slope,
        is_systematic_error: report.is_systematic_error,
    }
}
