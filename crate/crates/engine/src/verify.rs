//! Scoring hypotheses over the region population and running verification.

use std::collections::HashMap;

use errslice_core::documents::{
    HypothesisResult, RunConfig, RunDocument, RunStatus, ScoringMode, SCHEMA_VERSION,
};
use errslice_core::prompts::verification_template_ids;
use errslice_core::trend::{analyze, error_rate};
use errslice_core::{
    CandidateSlice, ErrorRegion, Grounding, Hypothesis, ImageRecord, Manifest, PromptType,
    ScoredRegion,
};
use futures::stream::{self, StreamExt};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{Gateway, ImageRef, ScoreJob};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("hypothesis {0} is not a search hypothesis")]
    NotSearch(String),
    #[error("endpoint outage while scoring {hypothesis_id}: {message}")]
    Outage {
        hypothesis_id: String,
        message: String,
    },
    #[error("run {run_id} is {status:?}; only pending or running runs can be executed")]
    NotRunnable { run_id: String, status: RunStatus },
    #[error("persisting run: {0}")]
    Persist(#[from] std::io::Error),
}

/// Regions of the target class, errors and non-errors alike.
pub fn region_population<'a>(
    manifest: &'a Manifest,
    target_class: &'a str,
) -> Vec<&'a ErrorRegion> {
    manifest.regions_of_class(target_class).collect()
}

pub fn whole_image(image: &ImageRecord) -> Grounding {
    Grounding::bbox(0.0, 0.0, image.width as f64, image.height as f64)
}

/// One yes/no score per region. Regions whose scoring failed are listed in
/// `unscored`; an endpoint outage fails the whole hypothesis.
pub async fn score_hypothesis(
    gateway: &Gateway,
    hypothesis: &Hypothesis,
    regions: &[&ErrorRegion],
    images: &HashMap<&str, &ImageRecord>,
    mode: ScoringMode,
) -> Result<CandidateSlice, VerifyError> {
    if hypothesis.prompt_type != PromptType::Search {
        return Err(VerifyError::NotSearch(hypothesis.hypothesis_id.clone()));
    }
    let mut unscored = Vec::new();
    let mut jobs = Vec::new();
    let mut scored_regions = Vec::new();
    for r in regions {
        let Some(image) = images.get(r.image_id.as_str()) else {
            unscored.push(r.region_id.clone());
            continue;
        };
        let grounding = match mode {
            ScoringMode::Instance => r.grounding.clone(),
            ScoringMode::ImageLevel => whole_image(image),
        };
        jobs.push(ScoreJob {
            image: ImageRef::of(image),
            grounding,
            query: hypothesis.query.clone(),
        });
        scored_regions.push(*r);
    }
    let results = gateway
        .score_batch(&jobs)
        .await
        .map_err(|e| VerifyError::Outage {
            hypothesis_id: hypothesis.hypothesis_id.clone(),
            message: e.to_string(),
        })?;
    let mut members = Vec::with_capacity(results.len());
    for (region, result) in scored_regions.into_iter().zip(results) {
        match result {
            Ok(v) => members.push(ScoredRegion {
                region_id: region.region_id.clone(),
                confidence: v.p_yes,
                is_model_error: region.is_model_error,
                degraded: v.degraded,
            }),
            Err(e) => {
                tracing::warn!(region = %region.region_id, error = %e, "region not scored");
                unscored.push(region.region_id.clone());
            }
        }
    }
    let mut slice = CandidateSlice::new(hypothesis.hypothesis_id.clone(), members);
    unscored.sort();
    slice.unscored = unscored;
    Ok(slice)
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    config: &'a RunConfig,
    templates: &'a [String],
    hypotheses: Vec<(&'a str, &'a str)>,
    region_population: &'a [String],
}

/// A pending run over the target-class population. The run id is a hash of
/// everything that determines its results.
pub fn new_run(
    config: RunConfig,
    hypotheses: Vec<Hypothesis>,
    manifest: &Manifest,
) -> Result<RunDocument, VerifyError> {
    if let Some(h) = hypotheses
        .iter()
        .find(|h| h.prompt_type != PromptType::Search)
    {
        return Err(VerifyError::NotSearch(h.hypothesis_id.clone()));
    }
    let region_population: Vec<String> = region_population(manifest, &config.target_class)
        .into_iter()
        .map(|r| r.region_id.clone())
        .collect();
    let templates = verification_template_ids();
    let identity = RunIdentity {
        config: &config,
        templates: &templates,
        hypotheses: hypotheses
            .iter()
            .map(|h| (h.hypothesis_id.as_str(), h.query.as_str()))
            .collect(),
        region_population: &region_population,
    };
    let digest = Sha256::digest(serde_json::to_vec(&identity).expect("run identity serializes"));
    Ok(RunDocument {
        schema_version: SCHEMA_VERSION,
        run_id: format!("run-{}", &hex::encode(digest)[..12]),
        status: RunStatus::Pending,
        config,
        templates,
        hypotheses,
        region_population,
        results: Vec::new(),
        failures: Vec::new(),
    })
}

/// Scores and analyzes every hypothesis still without a result, up to
/// `width` at a time. `persist` is called after every status change and
/// every finished hypothesis. A run left `running` by a crash can be passed
/// in again; completed hypotheses are not redone.
pub async fn run_verification<F>(
    gateway: &Gateway,
    run: &mut RunDocument,
    manifest: &Manifest,
    width: usize,
    mut persist: F,
) -> Result<(), VerifyError>
where
    F: FnMut(&RunDocument) -> std::io::Result<()>,
{
    match run.status {
        RunStatus::Pending => {
            run.status = RunStatus::Running;
            persist(run)?;
        }
        RunStatus::Running => {}
        status => {
            return Err(VerifyError::NotRunnable {
                run_id: run.run_id.clone(),
                status,
            })
        }
    }
    run.failures.clear();

    let by_id: HashMap<&str, &ErrorRegion> = manifest
        .regions
        .iter()
        .map(|r| (r.region_id.as_str(), r))
        .collect();
    let regions: Vec<&ErrorRegion> = run
        .region_population
        .iter()
        .filter_map(|id| by_id.get(id.as_str()).copied())
        .collect();
    let population: Vec<ScoredRegion> = regions
        .iter()
        .map(|r| ScoredRegion {
            region_id: r.region_id.clone(),
            confidence: 0.0,
            is_model_error: r.is_model_error,
            degraded: false,
        })
        .collect();
    let mean_error_rate = error_rate(&population);
    let images = manifest.image_index();
    let config = run.config.clone();
    let pending: Vec<Hypothesis> = run.pending_hypotheses().into_iter().cloned().collect();

    let (regions, images, config) = (&regions, &images, &config);
    let mut finished = stream::iter(pending)
        .map(|h: Hypothesis| async move {
            let outcome = score_hypothesis(gateway, &h, regions, images, config.scoring).await;
            let outcome = outcome.map(|slice| {
                let report = analyze(&slice, &config.trend, config.method, mean_error_rate);
                HypothesisResult {
                    hypothesis_id: h.hypothesis_id.clone(),
                    slice,
                    report,
                }
            });
            (h, outcome)
        })
        .buffer_unordered(width.max(1));
    while let Some((h, outcome)) = finished.next().await {
        match outcome {
            Ok(result) => {
                run.record(result);
            }
            Err(e) => {
                tracing::warn!(hypothesis = %h.hypothesis_id, error = %e, "hypothesis failed");
                run.record_failure(&h.hypothesis_id, e.to_string());
            }
        }
        persist(run)?;
    }
    drop(finished);
    run.status = run.settle_status();
    persist(run)?;
    Ok(())
}
