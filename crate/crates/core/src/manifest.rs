//! Dataset manifest: images, regions of the target classes, and ground-truth
//! slices. Field names follow `schemas/manifest.schema.json`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorRegion, GroundTruthSlice, GroundingKind, ImageRecord};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Manifest {
    #[serde(default)]
    pub images: Vec<ImageRecord>,
    #[serde(default)]
    pub regions: Vec<ErrorRegion>,
    #[serde(default)]
    pub gt_slices: Vec<GroundTruthSlice>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest is not a valid document: {0}")]
    Format(#[from] serde_json::Error),
}

/// One broken invariant, located by a path such as
/// `regions[3](r-17).grounding.box`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn image_index(&self) -> HashMap<&str, &ImageRecord> {
        self.images.iter().map(|i| (i.image_id.as_str(), i)).collect()
    }

    /// Regions of one class, errors and correct instances alike.
    pub fn regions_of_class<'a>(&'a self, class_label: &'a str) -> impl Iterator<Item = &'a ErrorRegion> {
        self.regions.iter().filter(move |r| r.class_label == class_label)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

/// Empty iff every manifest invariant holds.
pub fn validate(manifest: &Manifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    let mut images: HashMap<&str, &ImageRecord> = HashMap::new();
    for (i, img) in manifest.images.iter().enumerate() {
        let path = format!("images[{i}]({})", img.image_id);
        if img.image_id.is_empty() {
            push(path.clone(), "image_id is empty".into());
        }
        if img.width == 0 || img.height == 0 {
            push(
                path.clone(),
                format!("image size must be positive, got {}x{}", img.width, img.height),
            );
        }
        if images.insert(img.image_id.as_str(), img).is_some() {
            push(path, format!("duplicate image_id '{}'", img.image_id));
        }
    }

    let mut region_ids = HashSet::new();
    for (i, r) in manifest.regions.iter().enumerate() {
        let path = format!("regions[{i}]({})", r.region_id);
        if r.region_id.is_empty() {
            push(path.clone(), "region_id is empty".into());
        }
        if !region_ids.insert(r.region_id.as_str()) {
            push(path.clone(), format!("duplicate region_id '{}'", r.region_id));
        }
        if r.error_kind.is_error() != r.is_model_error {
            push(
                path.clone(),
                format!(
                    "is_model_error={} contradicts error_kind={:?}",
                    r.is_model_error, r.error_kind
                ),
            );
        }
        let image = images.get(r.image_id.as_str()).copied();
        if image.is_none() {
            push(
                format!("{path}.image_id"),
                format!("dangling reference to unknown image '{}'", r.image_id),
            );
        }

        let g = &r.grounding;
        let gpath = format!("{path}.grounding");
        let (want_box, want_point, want_mask) = match g.kind {
            GroundingKind::Box => (Some(true), false, false),
            GroundingKind::Point => (Some(false), true, false),
            GroundingKind::MaskRef => (None, false, true),
        };
        if want_box == Some(true) && g.bbox.is_none() {
            push(format!("{gpath}.box"), "box grounding requires a box".into());
        }
        if want_box == Some(false) && g.bbox.is_some() {
            push(format!("{gpath}.box"), "box not allowed for point grounding".into());
        }
        if want_point != g.point.is_some() {
            let msg = if want_point {
                "point grounding requires a point"
            } else {
                "point only allowed for point grounding"
            };
            push(format!("{gpath}.point"), msg.into());
        }
        if want_mask != g.mask_uri.is_some() {
            let msg = if want_mask {
                "mask_ref grounding requires mask_uri"
            } else {
                "mask_uri only allowed for mask_ref grounding"
            };
            push(format!("{gpath}.mask_uri"), msg.into());
        }
        if let Some([x0, y0, x1, y1]) = g.bbox {
            if !(x0 < x1 && y0 < y1) {
                push(
                    format!("{gpath}.box"),
                    format!("degenerate box [{x0}, {y0}, {x1}, {y1}]"),
                );
            }
            if let Some(img) = image {
                let (w, h) = (img.width as f64, img.height as f64);
                let inside = [x0, x1].iter().all(|x| (0.0..=w).contains(x))
                    && [y0, y1].iter().all(|y| (0.0..=h).contains(y));
                if !inside {
                    push(
                        format!("{gpath}.box"),
                        format!("box [{x0}, {y0}, {x1}, {y1}] outside image bounds {w}x{h}"),
                    );
                }
            }
        }
        if let (Some([x, y]), Some(img)) = (g.point, image) {
            if !((0.0..=img.width as f64).contains(&x) && (0.0..=img.height as f64).contains(&y)) {
                push(
                    format!("{gpath}.point"),
                    format!("point ({x}, {y}) outside image bounds {}x{}", img.width, img.height),
                );
            }
        }
    }

    let mut gt_ids = HashSet::new();
    for (i, gt) in manifest.gt_slices.iter().enumerate() {
        let path = format!("gt_slices[{i}]({})", gt.gt_id);
        if !gt_ids.insert(gt.gt_id.as_str()) {
            push(path.clone(), format!("duplicate gt_id '{}'", gt.gt_id));
        }
        if gt.member_region_ids.is_empty() {
            push(path.clone(), "ground-truth slice has no members".into());
        }
        for m in &gt.member_region_ids {
            if !region_ids.contains(m.as_str()) {
                push(
                    format!("{path}.member_region_ids"),
                    format!("dangling reference to unknown region '{m}'"),
                );
            }
        }
    }
    out
}
