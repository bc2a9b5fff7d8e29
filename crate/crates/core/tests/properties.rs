use std::collections::{BTreeSet, HashSet};

use errslice_core::manifest::Manifest;
use errslice_core::metrics::{
    best_slice_per_gt, precision_at_k, semantic_recall_precision, JudgeDecision,
};
use errslice_core::trend::{slope_trend_analysis, TrendConfig};
use errslice_core::*;
use proptest::prelude::*;

fn scored(id: usize, confidence: f64, err: bool) -> ScoredRegion {
    ScoredRegion {
        region_id: format!("r{id:04}"),
        confidence,
        is_model_error: err,
        degraded: false,
    }
}

fn members_strategy(max: usize) -> impl Strategy<Value = Vec<ScoredRegion>> {
    prop::collection::vec((0.0001f64..0.9999, any::<bool>()), 0..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (c, e))| scored(i, (c * 100.0).round() / 100.0, e))
            .collect()
    })
}

fn gt_slice(ids: BTreeSet<String>) -> GroundTruthSlice {
    GroundTruthSlice {
        gt_id: "gt".into(),
        name: "gt".into(),
        member_region_ids: ids,
        category: SliceCategory::ContextualInterference,
        task: TaskKind::Detection,
    }
}

proptest! {
    #[test]
    fn ranking_is_a_total_order_and_idempotent(members in members_strategy(60)) {
        let slice = CandidateSlice::new("h", members.clone());
        let again = CandidateSlice::new("h", slice.members().to_vec());
        prop_assert_eq!(slice.members(), again.members());
        for w in slice.members().windows(2) {
            prop_assert!(
                w[0].confidence > w[1].confidence
                    || (w[0].confidence == w[1].confidence && w[0].region_id < w[1].region_id)
            );
        }
        let mut reversed = members;
        reversed.reverse();
        let resorted = CandidateSlice::new("h", reversed);
        prop_assert_eq!(resorted.members(), slice.members());
    }

    #[test]
    fn p_yes_depends_only_on_logit_gap(a in -50.0f64..50.0, b in -50.0f64..50.0, shift in -100.0f64..100.0) {
        let p = p_yes_from_logits(a, b);
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((p + (1.0 - p) - 1.0).abs() <= 1e-12);
        let shifted = p_yes_from_logits(a + shift, b + shift);
        prop_assert!((p - shifted).abs() < 1e-12);
    }

    #[test]
    fn p_yes_is_increasing_in_gap(d1 in -30.0f64..30.0, delta in 0.01f64..5.0) {
        prop_assert!(p_yes_from_logits(d1 + delta, 0.0) > p_yes_from_logits(d1, 0.0));
    }

    #[test]
    fn precision_bounds_and_k_saturation(
        members in members_strategy(40),
        picks in prop::collection::vec(any::<bool>(), 40),
        k in 1usize..50,
    ) {
        let slice = CandidateSlice::new("h", members);
        let ids: BTreeSet<String> = slice
            .members()
            .iter()
            .zip(&picks)
            .filter(|(_, p)| **p)
            .map(|(m, _)| m.region_id.clone())
            .collect();
        let gt = gt_slice(ids);
        let (p, used) = precision_at_k(&gt, &slice, k);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(used, k.min(slice.len()));
        if k >= slice.len() {
            prop_assert_eq!(precision_at_k(&gt, &slice, k + 7), (p, used));
        }
    }

    #[test]
    fn gt_member_at_rank_one_never_hurts(members in members_strategy(40), k in 1usize..20) {
        prop_assume!(!members.is_empty());
        let slice = CandidateSlice::new("h", members);
        let mut ids: BTreeSet<String> = slice.members().iter().skip(1).step_by(3).map(|m| m.region_id.clone()).collect();
        let before = precision_at_k(&gt_slice(ids.clone()), &slice, k).0;
        ids.insert(slice.members()[0].region_id.clone());
        prop_assert!(precision_at_k(&gt_slice(ids), &slice, k).0 >= before);
    }

    #[test]
    fn affine_confidence_map_preserves_top_k(members in members_strategy(60), a in 0.05f64..0.9, b in 0.0f64..0.05, k in 1usize..30) {
        let slice = CandidateSlice::new("h", members.clone());
        let mapped = CandidateSlice::new(
            "h",
            members.into_iter().map(|m| ScoredRegion { confidence: a * m.confidence + b, ..m }).collect(),
        );
        let ids = |s: &CandidateSlice| s.top_k(k).iter().map(|m| m.region_id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&slice), ids(&mapped));
    }

    #[test]
    fn windows_are_nested_and_analysis_deterministic(members in members_strategy(400)) {
        let slice = CandidateSlice::new("h", members);
        let config = TrendConfig { max_slope_stderr: 10.0, ..TrendConfig::default() };
        let r1 = slope_trend_analysis(&slice, &config);
        let r2 = slope_trend_analysis(&slice, &config);
        prop_assert_eq!(&r1, &r2);
        for w in r1.slope_at_threshold.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].window_size <= w[0].window_size);
        }
        // Membership nesting, checked on the raw windows.
        let window = |t: f64| -> HashSet<&str> {
            slice.members().iter().filter(|m| m.confidence >= t).map(|m| m.region_id.as_str()).collect()
        };
        for pair in config.threshold_grid.windows(2) {
            prop_assert!(window(pair[1]).is_subset(&window(pair[0])));
        }
    }

    #[test]
    fn noiseless_affine_error_rate_is_recovered(slope in 0.1f64..0.9, levels in 3usize..12) {
        // Each level holds 20 members at one confidence; the number of errors
        // is chosen so the level's error rate is exactly `slope * (c - c0)`.
        let per_level = 20usize;
        let mut members = Vec::new();
        let mut id = 0;
        let mut points = Vec::new();
        for l in 0..levels {
            let errors = l * 2;
            let rate = errors as f64 / per_level as f64;
            let c = 0.02 + rate / slope;
            prop_assume!(c < 1.0);
            points.push(c);
            for j in 0..per_level {
                members.push(scored(id, c, j < errors));
                id += 1;
            }
        }
        let slice = CandidateSlice::new("h", members);
        let config = TrendConfig {
            threshold_grid: vec![0.0],
            bin_count: levels,
            min_window_size: levels,
            max_slope_stderr: 10.0,
            ..TrendConfig::default()
        };
        let r = slope_trend_analysis(&slice, &config);
        prop_assert!((r.max_slope - slope).abs() < 1e-9, "got {} want {}", r.max_slope, slope);
    }

    #[test]
    fn semantic_recall_never_exceeds_one(matches in prop::collection::vec(prop::option::of(1usize..6), 0..30)) {
        let decisions: Vec<JudgeDecision> = matches
            .into_iter()
            .map(|m| JudgeDecision { predicted_slice_id: "p".into(), matched_gt_index: m, raw_reply: String::new(), warning: None })
            .collect();
        let (recall, precision) = semantic_recall_precision(&decisions, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&recall));
        prop_assert!((0.0..=1.0).contains(&precision));
    }

    #[test]
    fn best_slice_mean_matches_independent_sum(
        gt_picks in prop::collection::vec(prop::collection::btree_set(0usize..30, 1..10), 1..8),
        slice_orders in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 30), 1..5),
    ) {
        let gts: Vec<GroundTruthSlice> = gt_picks
            .iter()
            .enumerate()
            .map(|(i, ids)| GroundTruthSlice {
                gt_id: format!("g{i}"),
                category: [SliceCategory::SemanticConfusion, SliceCategory::IntrinsicVisualDifficulty][i % 2],
                ..gt_slice(ids.iter().map(|j| format!("r{j:04}")).collect())
            })
            .collect();
        let slices: Vec<CandidateSlice> = slice_orders
            .iter()
            .enumerate()
            .map(|(s, confs)| CandidateSlice::new(format!("h{s}"), confs.iter().enumerate().map(|(i, c)| scored(i, *c, true)).collect()))
            .collect();
        let report = best_slice_per_gt(&gts, &slices, &[], 10).unwrap();
        let mut total = 0.0f64;
        for r in &report.per_slice {
            total += r.precision_at_k;
        }
        prop_assert!((report.mean_precision_at_k - total / report.per_slice.len() as f64).abs() < 1e-12);
        prop_assert!(report.per_category_means.values().all(|m| (0.0..=1.0).contains(m)));
    }
}

fn manifest_strategy() -> impl Strategy<Value = Manifest> {
    let image = (1u32..2000, 1u32..2000, "[a-z]{0,4}");
    prop::collection::vec(image, 1..5).prop_flat_map(|imgs| {
        let n_img = imgs.len();
        let region = (0..n_img, 0u8..3, 0u8..4, 0.0f64..0.5, 0.0f64..0.5);
        (Just(imgs), prop::collection::vec(region, 0..12))
    })
    .prop_map(|(imgs, regions)| {
        let images: Vec<ImageRecord> = imgs
            .iter()
            .enumerate()
            .map(|(i, (w, h, split))| ImageRecord {
                image_id: format!("img-{i}"),
                uri: format!("images/{i}.jpg"),
                width: *w,
                height: *h,
                dataset_split: split.clone(),
            })
            .collect();
        let regions: Vec<ErrorRegion> = regions
            .into_iter()
            .enumerate()
            .map(|(i, (img, kind, err, fx, fy))| {
                let im = &images[img];
                let (w, h) = (im.width as f64, im.height as f64);
                let bbox = [fx * w, fy * h, (fx + 0.5) * w, (fy + 0.5) * h];
                let grounding = match kind {
                    0 => Grounding::bbox(bbox[0], bbox[1], bbox[2], bbox[3]),
                    1 => Grounding::point(fx * w, fy * h),
                    _ => Grounding::mask(format!("masks/{i}.png"), Some(bbox)),
                };
                let error_kind = [ErrorKind::FalseNegative, ErrorKind::FalsePositive, ErrorKind::Misclassification, ErrorKind::None][err as usize];
                ErrorRegion {
                    region_id: format!("r-{i}"),
                    image_id: im.image_id.clone(),
                    grounding,
                    error_kind,
                    class_label: "bicycle".into(),
                    is_model_error: error_kind.is_error(),
                }
            })
            .collect();
        let gt_slices = if regions.is_empty() {
            vec![]
        } else {
            vec![GroundTruthSlice {
                gt_id: "gt-0".into(),
                name: "first region".into(),
                member_region_ids: [regions[0].region_id.clone()].into(),
                category: SliceCategory::IntrinsicVisualDifficulty,
                task: TaskKind::Segmentation,
            }]
        };
        Manifest { images, regions, gt_slices }
    })
}

proptest! {
    #[test]
    fn generated_manifests_are_valid_and_round_trip(m in manifest_strategy()) {
        prop_assert_eq!(m.validate(), vec![]);
        let back = Manifest::parse(&m.to_json()).unwrap();
        prop_assert_eq!(back, m);
    }
}
