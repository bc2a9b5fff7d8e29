use std::sync::{Arc, Mutex};

use errslice_core::documents::{RunConfig, RunDocument, RunStatus, ScoringMode};
use errslice_core::trend::{TrendConfig, TrendMethod};
use errslice_core::{ErrorKind, ErrorRegion, Grounding, Hypothesis, HypothesisOrigin, Manifest, PromptType};
use errslice_engine::gateway::*;
use errslice_engine::generation::hypothesis_id;
use errslice_engine::planted;
use errslice_engine::verify::*;

fn gateway_with(vlm: MockVlm) -> Gateway {
    let cfg = GatewayConfig {
        retry: RetryPolicy::immediate(),
        ..GatewayConfig::default()
    };
    Gateway::new(Arc::new(MockLlm::new(vec![])), Arc::new(vlm), cfg).unwrap()
}

fn planted_gateway() -> Gateway {
    gateway_with(MockVlm::from_fixture(&planted::mock_fixture(7)))
}

fn search(query: &str) -> Hypothesis {
    Hypothesis {
        hypothesis_id: hypothesis_id(query),
        query: query.into(),
        origin: HypothesisOrigin::KnowledgeDriven,
        prompt_type: PromptType::Search,
        factor: "test".into(),
        title: String::new(),
        description: String::new(),
        provenance: vec![],
    }
}

fn run_config(method: TrendMethod, scoring: ScoringMode) -> RunConfig {
    RunConfig {
        trend: TrendConfig::default(),
        method,
        k: 10,
        scoring,
        target_class: planted::TARGET_CLASS.into(),
        seed: 7,
    }
}

fn three_hypotheses() -> Vec<Hypothesis> {
    vec![
        search(planted::PLANTED_QUERY),
        search(planted::DECOY_QUERY),
        search(planted::DATA_QUERIES[0]),
    ]
}

#[tokio::test]
async fn planted_regions_take_the_top_ranks() {
    let m = planted::manifest();
    let regions = region_population(&m, planted::TARGET_CLASS);
    let slice = score_hypothesis(
        &planted_gateway(),
        &search(planted::PLANTED_QUERY),
        &regions,
        &m.image_index(),
        ScoringMode::Instance,
    )
    .await
    .unwrap();
    assert_eq!(slice.len(), 1000);
    assert!(!slice.is_partial());
    let gt = &m.gt_slices[0].member_region_ids;
    assert!(slice.members()[..planted::PLANTED].iter().all(|r| gt.contains(&r.region_id)));
    assert!(slice.members()[planted::PLANTED..].iter().all(|r| !gt.contains(&r.region_id)));
    assert!((slice.members()[0].confidence - 0.95).abs() < 1e-12);
}

#[tokio::test]
async fn empty_region_list_gives_empty_slice() {
    let m = Manifest::default();
    let slice = score_hypothesis(&planted_gateway(), &search("x"), &[], &m.image_index(), ScoringMode::Instance)
        .await
        .unwrap();
    assert!(slice.is_empty());
    assert!(slice.unscored.is_empty());
}

#[tokio::test]
async fn equal_confidences_order_by_region_id() {
    let mut m = planted::manifest();
    m.regions.truncate(2);
    m.regions.swap(0, 1);
    let regions: Vec<&ErrorRegion> = m.regions.iter().collect();
    let slice = score_hypothesis(
        &planted_gateway(),
        &search(planted::PLANTED_QUERY),
        &regions,
        &m.image_index(),
        ScoringMode::Instance,
    )
    .await
    .unwrap();
    let ids: Vec<&str> = slice.members().iter().map(|r| r.region_id.as_str()).collect();
    assert_eq!(ids, ["r-p-0000", "r-p-0001"]);
}

#[tokio::test]
async fn unscorable_regions_mark_the_slice_partial() {
    let mut m = planted::manifest();
    m.regions.truncate(3);
    m.regions[1].grounding = Grounding::bbox(5.0, 5.0, 5.0, 9.0);
    m.regions[2].image_id = "missing".into();
    let regions: Vec<&ErrorRegion> = m.regions.iter().collect();
    let slice = score_hypothesis(&planted_gateway(), &search("x"), &regions, &m.image_index(), ScoringMode::Instance)
        .await
        .unwrap();
    assert_eq!(slice.len(), 1);
    assert!(slice.is_partial());
    assert_eq!(slice.unscored, ["r-p-0001", "r-p-0002"]);
}

#[tokio::test]
async fn cluster_hypotheses_are_not_scored() {
    let mut h = search("bicycle occlusion");
    h.prompt_type = PromptType::Cluster;
    let m = planted::manifest();
    let out = score_hypothesis(&planted_gateway(), &h, &[], &m.image_index(), ScoringMode::Instance).await;
    assert!(matches!(out, Err(VerifyError::NotSearch(_))));
    assert!(new_run(run_config(TrendMethod::SlopeTrend, ScoringMode::Instance), vec![h], &m).is_err());
}

#[tokio::test]
async fn exactly_the_planted_hypothesis_is_systematic() {
    let m = planted::manifest();
    let mut run = new_run(
        run_config(TrendMethod::SlopeTrend, ScoringMode::Instance),
        three_hypotheses(),
        &m,
    )
    .unwrap();
    assert_eq!(run.status, RunStatus::Pending);
    let mut statuses = Vec::new();
    run_verification(&planted_gateway(), &mut run, &m, 2, |r| {
        statuses.push(r.status);
        Ok(())
    })
    .await
    .unwrap();
    assert_eq!(run.status, RunStatus::Complete);
    assert_eq!(statuses.first(), Some(&RunStatus::Running));
    assert_eq!(statuses.len(), 1 + 3 + 1);
    let flagged: Vec<String> = run
        .reports()
        .into_iter()
        .filter(|r| r.is_systematic_error)
        .map(|r| r.hypothesis_id)
        .collect();
    assert_eq!(flagged, [hypothesis_id(planted::PLANTED_QUERY)]);
    let planted_report = &run.results[0].report;
    assert!(planted_report.max_slope > 0.5 && planted_report.max_slope < 1.0, "{}", planted_report.max_slope);
    let ids: Vec<&str> = run.results.iter().map(|r| r.hypothesis_id.as_str()).collect();
    let expected: Vec<String> = three_hypotheses().iter().map(|h| h.hypothesis_id.clone()).collect();
    assert_eq!(ids, expected);
}

#[tokio::test]
async fn baseline_method_uses_population_mean() {
    let m = planted::manifest();
    let mut run = new_run(
        run_config(TrendMethod::ErrorRateThreshold, ScoringMode::Instance),
        vec![search(planted::PLANTED_QUERY)],
        &m,
    )
    .unwrap();
    run_verification(&planted_gateway(), &mut run, &m, 1, |_| Ok(())).await.unwrap();
    let report = &run.results[0].report;
    assert_eq!(report.mean_error_rate, Some(0.19));
    assert!((report.top_window_error_rate.unwrap() - 0.7).abs() < 1e-12);
    assert!(report.is_systematic_error);
}

#[tokio::test]
async fn zero_hypotheses_complete_immediately() {
    let m = planted::manifest();
    let mut run = new_run(run_config(TrendMethod::SlopeTrend, ScoringMode::Instance), vec![], &m).unwrap();
    run_verification(&planted_gateway(), &mut run, &m, 4, |_| Ok(())).await.unwrap();
    assert_eq!(run.status, RunStatus::Complete);
    assert!(run.results.is_empty());
}

#[tokio::test]
async fn outage_mid_run_leaves_partial_run_with_completed_slices() {
    let m = planted::manifest();
    let vlm = MockVlm::from_fixture(&planted::mock_fixture(7)).with_outage_after(1000);
    let mut run = new_run(
        run_config(TrendMethod::SlopeTrend, ScoringMode::Instance),
        three_hypotheses(),
        &m,
    )
    .unwrap();
    run_verification(&gateway_with(vlm), &mut run, &m, 1, |_| Ok(())).await.unwrap();
    assert_eq!(run.status, RunStatus::Partial);
    assert_eq!(run.results.len(), 1);
    assert_eq!(run.results[0].hypothesis_id, hypothesis_id(planted::PLANTED_QUERY));
    assert_eq!(run.results[0].slice.len(), 1000);
    assert_eq!(run.failures.len(), 2);
    assert!(run.failures[0].error.contains("outage"));
}

#[tokio::test]
async fn total_outage_fails_the_run() {
    let m = planted::manifest();
    let vlm = MockVlm::from_fixture(&planted::mock_fixture(7)).with_outage_after(0);
    let mut run = new_run(
        run_config(TrendMethod::SlopeTrend, ScoringMode::Instance),
        vec![search(planted::PLANTED_QUERY)],
        &m,
    )
    .unwrap();
    run_verification(&gateway_with(vlm), &mut run, &m, 1, |_| Ok(())).await.unwrap();
    assert_eq!(run.status, RunStatus::Failed);
}

#[tokio::test]
async fn resumed_run_skips_finished_hypotheses() {
    let m = planted::manifest();
    let mut run = new_run(
        run_config(TrendMethod::SlopeTrend, ScoringMode::Instance),
        three_hypotheses(),
        &m,
    )
    .unwrap();
    let snapshots: Mutex<Vec<RunDocument>> = Mutex::new(Vec::new());
    run_verification(&planted_gateway(), &mut run, &m, 1, |r| {
        snapshots.lock().unwrap().push(r.clone());
        Ok(())
    })
    .await
    .unwrap();
    // State persisted after the first hypothesis, as if the process died there.
    let mut crashed = snapshots.lock().unwrap()[1].clone();
    assert_eq!(crashed.status, RunStatus::Running);
    assert_eq!(crashed.results.len(), 1);

    let vlm = Arc::new(MockVlm::from_fixture(&planted::mock_fixture(7)));
    let cfg = GatewayConfig {
        retry: RetryPolicy::immediate(),
        ..GatewayConfig::default()
    };
    let g = Gateway::new(Arc::new(MockLlm::new(vec![])), vlm.clone(), cfg).unwrap();
    run_verification(&g, &mut crashed, &m, 1, |_| Ok(())).await.unwrap();
    assert_eq!(vlm.calls(), 2000);
    assert_eq!(crashed.status, RunStatus::Complete);
    assert_eq!(crashed, run);
}

#[tokio::test]
async fn finished_runs_are_not_rerun() {
    let m = planted::manifest();
    let mut run = new_run(run_config(TrendMethod::SlopeTrend, ScoringMode::Instance), vec![], &m).unwrap();
    run.status = RunStatus::Complete;
    let out = run_verification(&planted_gateway(), &mut run, &m, 1, |_| Ok(())).await;
    assert!(matches!(out, Err(VerifyError::NotRunnable { .. })));
}

#[tokio::test]
async fn run_id_depends_on_inputs_only() {
    let m = planted::manifest();
    let cfg = run_config(TrendMethod::SlopeTrend, ScoringMode::Instance);
    let a = new_run(cfg.clone(), three_hypotheses(), &m).unwrap();
    let b = new_run(cfg.clone(), three_hypotheses(), &m).unwrap();
    let c = new_run(cfg, three_hypotheses()[..2].to_vec(), &m).unwrap();
    assert_eq!(a.run_id, b.run_id);
    assert_ne!(a.run_id, c.run_id);
    assert!(a.run_id.starts_with("run-") && a.run_id.len() == 16);
}

/// Records every question and answers with a fixed logit pair.
#[derive(Default)]
struct RecordingVlm {
    questions: Mutex<Vec<String>>,
}

#[async_trait::async_trait]
impl ChatBackend for RecordingVlm {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        self.questions.lock().unwrap().push(request.user_text());
        Ok(ChatReply {
            text: "Yes".into(),
            top_logprobs: vec![
                errslice_core::TokenLogprob::new("Yes", -0.1),
                errslice_core::TokenLogprob::new("No", -2.4),
            ],
        })
    }

    fn max_top_logprobs(&self) -> Option<u32> {
        Some(20)
    }
}

#[tokio::test]
async fn image_level_mode_grounds_on_the_whole_image() {
    let m = Manifest {
        images: planted::manifest().images[..1].to_vec(),
        regions: vec![ErrorRegion {
            region_id: "r-1".into(),
            image_id: planted::planted_image(0),
            grounding: Grounding::bbox(10.0, 10.0, 50.0, 50.0),
            error_kind: ErrorKind::None,
            class_label: planted::TARGET_CLASS.into(),
            is_model_error: false,
        }],
        gt_slices: vec![],
    };
    let vlm = Arc::new(RecordingVlm::default());
    let cfg = GatewayConfig {
        retry: RetryPolicy::immediate(),
        ..GatewayConfig::default()
    };
    let g = Gateway::new(Arc::new(MockLlm::new(vec![])), vlm.clone(), cfg).unwrap();
    let regions = region_population(&m, planted::TARGET_CLASS);
    for mode in [ScoringMode::ImageLevel, ScoringMode::Instance] {
        let slice = score_hypothesis(&g, &search("x"), &regions, &m.image_index(), mode).await.unwrap();
        assert_eq!(slice.len(), 1);
    }
    let questions = vlm.questions.lock().unwrap();
    assert!(questions[0].contains("[0, 0, 640, 480]"), "{}", questions[0]);
    assert!(questions[1].contains("[10, 10, 50, 50]"), "{}", questions[1]);
}
