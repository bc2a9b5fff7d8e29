//! Flat tables and ids for the artifacts written next to run documents.

use errslice_core::documents::{HypothesesDocument, RunDocument};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// `prefix-` plus 12 hex digits of SHA-256 over the document's JSON.
pub fn content_id<T: Serialize>(prefix: &str, doc: &T) -> String {
    let digest = Sha256::digest(serde_json::to_vec(doc).expect("document serializes"));
    format!("{prefix}-{}", &hex::encode(digest)[..12])
}

pub fn generation_id(doc: &HypothesesDocument) -> String {
    content_id("gen", doc)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per hypothesis: verdict, slope, window and coverage. Failed
/// hypotheses appear with their error and no verdict.
pub fn verdict_table(run: &RunDocument) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record([
        "hypothesis_id",
        "query",
        "method",
        "systematic",
        "max_slope",
        "best_threshold",
        "top_window_error_rate",
        "members",
        "unscored",
        "error",
    ])
    .expect("in-memory write");
    for h in &run.hypotheses {
        let row: Vec<String> = match run.result(&h.hypothesis_id) {
            Some(r) => vec![
                h.hypothesis_id.clone(),
                h.query.clone(),
                serde_json::to_value(r.report.method).unwrap().as_str().unwrap().to_string(),
                r.report.is_systematic_error.to_string(),
                if r.report.max_slope.is_finite() { r.report.max_slope.to_string() } else { String::new() },
                fmt_opt(r.report.best_threshold),
                fmt_opt(r.report.top_window_error_rate),
                r.slice.len().to_string(),
                r.slice.unscored.len().to_string(),
                String::new(),
            ],
            None => {
                let error = run
                    .failures
                    .iter()
                    .find(|f| f.hypothesis_id == h.hypothesis_id)
                    .map(|f| f.error.clone())
                    .unwrap_or_else(|| "not run".into());
                let mut row = vec![h.hypothesis_id.clone(), h.query.clone()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(error);
                row
            }
        };
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
