//! Synthetic dataset with one planted error slice, plus the scripted mock
//! replies that drive the whole pipeline over it.
//!
//! 1000 bicycle regions, each on its own image. The 150 regions on `img-p-*`
//! images are "at night": the mock VLM answers the night query with 0.95 on
//! them and 0.05 elsewhere. 105 of the planted regions are model errors
//! against 85 of the 850 background regions.

use std::collections::BTreeSet;

use errslice_core::{
    ErrorKind, ErrorRegion, Grounding, GroundTruthSlice, ImageRecord, Manifest, SliceCategory, TaskKind,
};
use serde_json::json;

use crate::gateway::{CaptionRule, LlmRule, MockFixture, VlmRule};

pub const PLANTED: usize = 150;
pub const BACKGROUND: usize = 850;
pub const TARGET_CLASS: &str = "bicycle";
pub const PLANTED_QUERY: &str = "bicycle at night";
pub const DECOY_QUERY: &str = "bicycle in heavy rain";
pub const CLUSTER_QUERY: &str = "bicycle occlusion";
pub const DATA_QUERIES: [&str; 2] = ["bicycle obscured by a car", "bicycle obscured by a person"];

pub fn planted_image(i: usize) -> String {
    format!("img-p-{i:04}")
}

pub fn background_image(i: usize) -> String {
    format!("img-b-{i:04}")
}

fn region(image_id: &str, i: usize, error: bool) -> (ImageRecord, ErrorRegion) {
    let x = (i % 40 * 11) as f64;
    let y = (i % 25 * 13) as f64;
    let image = ImageRecord {
        image_id: image_id.to_string(),
        uri: format!("images/{image_id}.jpg"),
        width: 640,
        height: 480,
        dataset_split: "val".into(),
    };
    let region = ErrorRegion {
        region_id: format!("r-{}", &image_id[4..]),
        image_id: image_id.to_string(),
        grounding: Grounding::bbox(x, y, x + 96.0 + (i % 7) as f64 * 8.0, y + 64.0 + (i % 5) as f64 * 8.0),
        error_kind: if error { ErrorKind::FalseNegative } else { ErrorKind::None },
        class_label: TARGET_CLASS.into(),
        is_model_error: error,
    };
    (image, region)
}

/// Planted region `i` is an error for 7 of every 10 indices, background
/// region `i` for 1 of every 10.
pub fn manifest() -> Manifest {
    let mut m = Manifest::default();
    let mut members = BTreeSet::new();
    for i in 0..PLANTED {
        let (image, r) = region(&planted_image(i), i, (i * 7) % 10 < 7);
        members.insert(r.region_id.clone());
        m.images.push(image);
        m.regions.push(r);
    }
    for i in 0..BACKGROUND {
        let (image, r) = region(&background_image(i), i, i % 10 == 0);
        m.images.push(image);
        m.regions.push(r);
    }
    m.gt_slices.push(GroundTruthSlice {
        gt_id: "gt-01".into(),
        name: "Bicycle at night".into(),
        member_region_ids: members,
        category: SliceCategory::ContextualInterference,
        task: TaskKind::Detection,
    });
    m
}

fn llm(system: &str, user: Option<&str>, reply: String) -> LlmRule {
    LlmRule {
        system_contains: Some(system.into()),
        user_contains: user.map(String::from),
        replies: vec![reply],
        transient_failures: 0,
    }
}

pub fn knowledge_reply() -> String {
    let doc = json!({
        "title": "Possible failure reasons for bicycle detection model",
        "hypothesis": {
            "Environmental Conditions": [
                {"title": "Low light", "description": "Night scenes lose contrast and colour.",
                 "prompts": [{"prompt": PLANTED_QUERY, "type": "search"}]},
                {"title": "Weather", "description": "Rain streaks and wet reflections.",
                 "prompts": [{"prompt": DECOY_QUERY, "type": "search"}]}
            ],
            "Object Attributes": [
                {"title": "Occlusion", "description": "Parts of the bicycle are hidden.",
                 "prompts": [{"prompt": CLUSTER_QUERY, "type": "cluster"}]}
            ]
        }
    });
    format!("```json\n{}\n```", serde_json::to_string_pretty(&doc).unwrap())
}

/// Replies for every prompt the pipeline sends, including the judge.
pub fn mock_fixture(seed: u64) -> MockFixture {
    let night = VlmRule {
        query_contains: Some("at night".into()),
        ..VlmRule::default()
    };
    MockFixture {
        seed,
        llm: vec![
            llm("failure analysis", None, knowledge_reply()),
            llm("most relevant", Some("parked car"), "car".into()),
            llm("most relevant", Some("pedestrian"), "person".into()),
            llm("most relevant", None, "none".into()),
            llm(
                "text clustering",
                None,
                json!({"occluding object": ["car", "person"]}).to_string(),
            ),
            llm(
                "retrieval prompt",
                None,
                json!({"results": DATA_QUERIES}).to_string(),
            ),
            llm("ground truth patterns", Some("Algorithm output: bicycle at night"), "1".into()),
            llm("ground truth patterns", None, "-1".into()),
        ],
        vlm: vec![
            VlmRule {
                image_prefix: Some("img-p-".into()),
                p_yes: Some(0.95),
                ..night.clone()
            },
            VlmRule {
                p_yes: Some(0.05),
                ..night
            },
        ],
        captions: vec![
            CaptionRule {
                image_prefix: Some("img-p-".into()),
                attribute_contains: None,
                caption: "A dark street scene; the bicycle is partly hidden behind a parked car.".into(),
            },
            CaptionRule {
                image_prefix: None,
                attribute_contains: None,
                caption: "A bicycle on the sidewalk with a pedestrian walking in front of it.".into(),
            },
        ],
    }
}

pub fn pipeline_toml(seed: u64) -> String {
    format!(
        r#"seed = {seed}

[task]
preset = "detection"
target_class = "{TARGET_CLASS}"
task_kind = "detection"

[generation]
sample_size = 200

[verification]
method = "slope_trend"
k = 10
scoring = "instance"

[mock]
fixture = "mock.json"
"#
    )
}
