//! Prompt templates. The long texts live in `assets/prompts/*.txt`; every
//! template carries a version so generated documents can record which
//! wording produced them.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::model::{Grounding, GroundingKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
}

impl Template {
    pub fn id(&self) -> String {
        format!("{}@v{}", self.name, self.version)
    }

    /// Replaces every `{key}` placeholder.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.trim_end_matches('\n').to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

macro_rules! template {
    ($name:literal, $file:literal) => {
        Template {
            name: $name,
            version: 1,
            text: include_str!(concat!("../assets/prompts/", $file)),
        }
    };
}

pub const KNOWLEDGE_SYSTEM: Template = template!("knowledge_system", "knowledge_system.v1.txt");
pub const CAPTION_SYSTEM: Template = template!("caption_system", "caption_system.v1.txt");
pub const KEYWORD_EXTRACTION: Template = template!("keyword_extraction", "keyword_extraction.v1.txt");
pub const KEYWORD_CLUSTERING: Template = template!("keyword_clustering", "keyword_clustering.v1.txt");
pub const QUERY_REFINEMENT: Template = template!("query_refinement", "query_refinement.v1.txt");
pub const SEMANTIC_JUDGE: Template = template!("semantic_judge", "semantic_judge.v1.txt");

pub const BOX_QUESTION: Template = Template {
    name: "box_question",
    version: 1,
    text: "If the region {box} matches the description {query}, please answer yes else no.",
};
pub const POINT_QUESTION: Template = Template {
    name: "point_question",
    version: 1,
    text: "If the region pointed to by {point_2d: {point}} matches the description {query}, please answer yes else no.",
};

/// Templates used by hypothesis generation, recorded in its output document.
pub fn generation_template_ids() -> Vec<String> {
    [
        KNOWLEDGE_SYSTEM,
        CAPTION_SYSTEM,
        KEYWORD_EXTRACTION,
        KEYWORD_CLUSTERING,
        QUERY_REFINEMENT,
    ]
    .iter()
    .map(Template::id)
    .collect()
}

pub fn verification_template_ids() -> Vec<String> {
    [BOX_QUESTION, POINT_QUESTION].iter().map(Template::id).collect()
}

fn coord(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{:.0}", x)
    } else {
        format!("{x}")
    }
}

/// `[x_min, y_min, x_max, y_max]` with integral pixels written without decimals.
pub fn format_box(b: [f64; 4]) -> String {
    format!("[{}, {}, {}, {}]", coord(b[0]), coord(b[1]), coord(b[2]), coord(b[3]))
}

pub fn format_point(p: [f64; 2]) -> String {
    format!("({}, {})", coord(p[0]), coord(p[1]))
}

/// The grounded yes/no question: the point template for point groundings,
/// the box template otherwise (mask references use their bounding box).
/// `None` when the grounding lacks the geometry its kind requires.
pub fn grounded_question(grounding: &Grounding, query: &str) -> Option<String> {
    match grounding.kind {
        GroundingKind::Point => {
            let p = grounding.point?;
            Some(
                POINT_QUESTION
                    .text
                    .replace("{point}", &format_point(p))
                    .replace("{query}", query),
            )
        }
        GroundingKind::Box | GroundingKind::MaskRef => {
            let b = grounding.prompt_box()?;
            Some(BOX_QUESTION.render(&[("box", &format_box(b)), ("query", query)]))
        }
    }
}

pub fn caption_system(attribute: &str) -> String {
    CAPTION_SYSTEM.render(&[("Attribute", attribute)])
}

pub fn keyword_extraction_system(attribute: &str) -> String {
    KEYWORD_EXTRACTION.render(&[("Attribute", attribute)])
}

pub fn keyword_extraction_user(attribute: &str, caption: &str) -> String {
    format!("Attribute: {attribute}\nCaption: {caption}")
}

pub fn keyword_clustering_system(attribute: &str) -> String {
    KEYWORD_CLUSTERING.render(&[("Attribute", attribute)])
}

/// Keyword list in the same bracketed, single-quoted form the template's
/// example uses.
pub fn keyword_list(keywords: &[String]) -> String {
    let items: Vec<String> = keywords
        .iter()
        .map(|k| format!("'{}'", k.replace('\'', "\\'")))
        .collect();
    format!("[{}]", items.join(", "))
}

pub fn query_refinement_system(attribute: &str) -> String {
    QUERY_REFINEMENT.render(&[("Attribute", attribute)])
}

pub fn judge_user(gt_names: &[String], algorithm_output: &str) -> String {
    let mut out = String::from("Ground truth patterns:\n");
    for (i, name) in gt_names.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, name));
    }
    out.push_str(&format!("\nAlgorithm output: {algorithm_output}"));
    out
}

/// Task-context user prompts for the benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskPreset {
    Detection,
    Segmentation,
    Waterbirds,
    Celeba,
    NicoPlusPlus,
}

impl TaskPreset {
    pub fn template(self) -> Template {
        match self {
            Self::Detection => template!("task_detection", "task_detection.v1.txt"),
            Self::Segmentation => template!("task_segmentation", "task_segmentation.v1.txt"),
            Self::Waterbirds => template!("task_waterbirds", "task_waterbirds.v1.txt"),
            Self::Celeba => template!("task_celeba", "task_celeba.v1.txt"),
            Self::NicoPlusPlus => template!("task_nicopp", "task_nicopp.v1.txt"),
        }
    }

    pub fn render(self, label: &str) -> String {
        self.template().render(&[("label", label)])
    }
}
