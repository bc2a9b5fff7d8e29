//! Knowledge-driven and data-driven hypothesis generation.

use std::collections::{BTreeSet, HashMap};

use errslice_core::documents::{AttributeCluster, HypothesesDocument, TaskContext, SCHEMA_VERSION};
use errslice_core::prompts::{
    generation_template_ids, keyword_clustering_system, keyword_extraction_system, keyword_extraction_user,
    keyword_list, query_refinement_system, KNOWLEDGE_SYSTEM,
};
use errslice_core::sampling::sample_subset;
use errslice_core::structured::{HypothesisDoc, SchemaId, StructuredDoc};
use errslice_core::{dedup_hypotheses, normalize_query, Hypothesis, HypothesisOrigin, Manifest, PromptType};
use futures::future::join_all;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{ChatRequest, Decoding, Gateway, GatewayError, ImageRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct GenerationConfig {
    /// Error regions captioned per cluster attribute.
    pub sample_size: usize,
    pub max_values_per_attribute: usize,
    pub caption_chars: usize,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            sample_size: 200,
            max_values_per_attribute: 20,
            caption_chars: 512,
            max_tokens: 4096,
        }
    }
}

/// `h-` plus the first 12 hex digits of SHA-256 over the normalized query.
pub fn hypothesis_id(query: &str) -> String {
    let digest = Sha256::digest(normalize_query(query).as_bytes());
    format!("h-{}", &hex::encode(digest)[..12])
}

fn generation_decoding(gateway: &Gateway, max_tokens: u32) -> Decoding {
    Decoding {
        max_tokens,
        temperature: gateway.config().generation_temperature,
        top_logprobs: 0,
        seed: Some(gateway.config().seed),
    }
}

fn unexpected(schema: SchemaId) -> GatewayError {
    GatewayError::Rejected(format!("parser returned a document of the wrong kind for {schema}"))
}

pub async fn generate_knowledge_hypotheses(
    gateway: &Gateway,
    ctx: &TaskContext,
    config: &GenerationConfig,
) -> Result<Vec<Hypothesis>, GatewayError> {
    let request = ChatRequest::text(
        KNOWLEDGE_SYSTEM.text,
        ctx.task_description.clone(),
        generation_decoding(gateway, config.max_tokens),
    );
    let reply = gateway.complete_structured(&request, SchemaId::HypothesisDoc).await?;
    let StructuredDoc::Hypotheses(doc) = reply.doc else {
        return Err(unexpected(SchemaId::HypothesisDoc));
    };
    Ok(hypotheses_from_doc(doc))
}

/// Flattens a parsed hypothesis document, deduplicated, in document order.
pub fn hypotheses_from_doc(doc: HypothesisDoc) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    for (factor, patterns) in doc.factors {
        for pattern in patterns {
            for entry in pattern.prompts {
                out.push(Hypothesis {
                    hypothesis_id: hypothesis_id(&entry.prompt),
                    query: entry.prompt,
                    origin: HypothesisOrigin::KnowledgeDriven,
                    prompt_type: entry.prompt_type,
                    factor: factor.clone(),
                    title: pattern.title.clone(),
                    description: pattern.description.clone(),
                    provenance: vec!["task-context".into()],
                });
            }
        }
    }
    dedup_hypotheses(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Caption {
    pub region_id: String,
    pub attribute: String,
    pub text: String,
}

/// Captions a seeded sample of the target class's error regions for one
/// attribute. Failed regions are reported, not fatal.
pub async fn caption_sample(
    gateway: &Gateway,
    manifest: &Manifest,
    target_class: &str,
    attribute: &str,
    sample_size: usize,
    seed: u64,
) -> (Vec<Caption>, Vec<String>) {
    let errors: Vec<_> = manifest
        .regions_of_class(target_class)
        .filter(|r| r.is_model_error)
        .collect();
    let sample = sample_subset(&errors, sample_size, seed);
    let images = manifest.image_index();
    let calls = sample.iter().map(|r| async {
        let Some(image) = images.get(r.image_id.as_str()) else {
            return Err(format!("region {}: unknown image {}", r.region_id, r.image_id));
        };
        gateway
            .caption_region(&ImageRef::of(image), &r.grounding, attribute)
            .await
            .map(|text| Caption {
                region_id: r.region_id.clone(),
                attribute: attribute.to_string(),
                text,
            })
            .map_err(|e| format!("caption {} for '{attribute}': {e}", r.region_id))
    });
    let mut captions = Vec::new();
    let mut ledger = Vec::new();
    for outcome in join_all(calls).await {
        match outcome {
            Ok(c) => captions.push(c),
            Err(e) => ledger.push(e),
        }
    }
    (captions, ledger)
}

fn truncate_chars(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn is_none_value(v: &str) -> bool {
    v.trim().trim_matches(|c| c == '\'' || c == '"').eq_ignore_ascii_case("none")
}

/// Two LLM steps per attribute: one keyword per caption, then clustering of
/// the raw keyword list. Attributes keep their first-appearance order.
pub async fn infer_attribute_values(
    gateway: &Gateway,
    captions: &[Caption],
    config: &GenerationConfig,
) -> Result<Vec<AttributeCluster>, GatewayError> {
    let mut attributes: Vec<&str> = Vec::new();
    for c in captions {
        if !attributes.contains(&c.attribute.as_str()) {
            attributes.push(&c.attribute);
        }
    }
    let mut clusters = Vec::new();
    for attribute in attributes {
        let mut keywords = Vec::new();
        let mut sources = Vec::new();
        for c in captions.iter().filter(|c| c.attribute == attribute) {
            let request = ChatRequest::text(
                keyword_extraction_system(attribute),
                keyword_extraction_user(attribute, truncate_chars(&c.text, config.caption_chars)),
                Decoding::greedy(32, gateway.config().seed),
            );
            let reply = gateway.complete_structured(&request, SchemaId::KeywordList).await?;
            let StructuredDoc::Keywords(words) = reply.doc else {
                return Err(unexpected(SchemaId::KeywordList));
            };
            if let Some(word) = words.into_iter().next().filter(|w| !is_none_value(w)) {
                keywords.push(word);
                sources.push(format!("region:{}", c.region_id));
            }
        }
        if keywords.is_empty() {
            continue;
        }
        let request = ChatRequest::text(
            keyword_clustering_system(attribute),
            keyword_list(&keywords),
            Decoding::greedy(config.max_tokens, gateway.config().seed),
        );
        let reply = gateway.complete_structured(&request, SchemaId::ClusterDoc).await?;
        let StructuredDoc::Clusters(groups) = reply.doc else {
            return Err(unexpected(SchemaId::ClusterDoc));
        };
        let mut seen = BTreeSet::new();
        let mut budget = config.max_values_per_attribute;
        for (category, values) in groups {
            let mut kept = Vec::new();
            for v in values {
                let v = v.trim().to_string();
                if budget == 0 || v.is_empty() || is_none_value(&v) || !seen.insert(normalize_query(&v)) {
                    continue;
                }
                budget -= 1;
                kept.push(v);
            }
            clusters.push(AttributeCluster {
                attribute: attribute.to_string(),
                category,
                values: kept,
                provenance: sources.clone(),
            });
        }
    }
    Ok(clusters)
}

/// One retrieval query per (attribute, value) via the refinement prompt,
/// one call per attribute. Clusters without values are skipped.
pub async fn refine_to_queries(
    gateway: &Gateway,
    clusters: &[AttributeCluster],
    config: &GenerationConfig,
) -> Result<Vec<Hypothesis>, GatewayError> {
    let mut attributes: Vec<&str> = Vec::new();
    for c in clusters.iter().filter(|c| !c.values.is_empty()) {
        if !attributes.contains(&c.attribute.as_str()) {
            attributes.push(&c.attribute);
        }
    }
    let mut out = Vec::new();
    for attribute in attributes {
        let group: Vec<&AttributeCluster> = clusters
            .iter()
            .filter(|c| c.attribute == attribute && !c.values.is_empty())
            .collect();
        let mut listing = serde_json::Map::new();
        let mut pairs = Vec::new();
        for c in &group {
            listing.insert(c.category.clone(), c.values.clone().into());
            pairs.extend(c.values.iter().map(|v| (*c, v.as_str())));
        }
        let request = ChatRequest::text(
            query_refinement_system(attribute),
            serde_json::Value::Object(listing).to_string(),
            generation_decoding(gateway, config.max_tokens),
        );
        let reply = gateway.complete_structured(&request, SchemaId::QueryList).await?;
        let StructuredDoc::Queries(queries) = reply.doc else {
            return Err(unexpected(SchemaId::QueryList));
        };
        let aligned = queries.len() == pairs.len();
        for (i, query) in queries.into_iter().enumerate() {
            let query = query.trim().to_string();
            if query.is_empty() {
                continue;
            }
            let (category, value, mut provenance) = if aligned {
                let (c, v) = pairs[i];
                (c.category.clone(), v.to_string(), vec![format!("cluster:{attribute}/{}={v}", c.category)])
            } else {
                (String::new(), String::new(), vec![format!("cluster:{attribute}")])
            };
            let sources: BTreeSet<&String> = group.iter().flat_map(|c| &c.provenance).collect();
            provenance.extend(sources.into_iter().cloned());
            out.push(Hypothesis {
                hypothesis_id: hypothesis_id(&query),
                query,
                origin: HypothesisOrigin::DataDriven,
                prompt_type: PromptType::Search,
                factor: attribute.to_string(),
                title: category,
                description: value,
                provenance,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationOutput {
    pub hypotheses: Vec<Hypothesis>,
    pub knowledge_count: usize,
    pub data_count: usize,
    pub clusters: Vec<AttributeCluster>,
    pub error_ledger: Vec<String>,
}

/// Knowledge hypotheses first; every cluster-type knowledge hypothesis then
/// drives the data chain (sample, caption, infer, refine) with its query as
/// the attribute. The result holds search hypotheses only, deduplicated.
/// A failing data chain is recorded in the ledger and skipped.
pub async fn run_generation(
    gateway: &Gateway,
    ctx: &TaskContext,
    manifest: &Manifest,
    config: &GenerationConfig,
    seed: u64,
) -> Result<GenerationOutput, GatewayError> {
    let knowledge = generate_knowledge_hypotheses(gateway, ctx, config).await?;
    let mut output = GenerationOutput::default();
    let mut data = Vec::new();
    for parent in knowledge.iter().filter(|h| h.prompt_type == PromptType::Cluster) {
        let attribute = parent.query.as_str();
        let (captions, ledger) =
            caption_sample(gateway, manifest, &ctx.target_class, attribute, config.sample_size, seed).await;
        output.error_ledger.extend(ledger);
        let clusters = match infer_attribute_values(gateway, &captions, config).await {
            Ok(c) => c,
            Err(e) => {
                output.error_ledger.push(format!("attribute inference for '{attribute}': {e}"));
                continue;
            }
        };
        let clusters: Vec<AttributeCluster> = clusters
            .into_iter()
            .map(|mut c| {
                c.provenance.insert(0, format!("hypothesis:{}", parent.hypothesis_id));
                c
            })
            .collect();
        match refine_to_queries(gateway, &clusters, config).await {
            Ok(hs) => data.extend(hs),
            Err(e) => output.error_ledger.push(format!("query refinement for '{attribute}': {e}")),
        }
        output.clusters.extend(clusters);
    }
    let search: Vec<Hypothesis> = knowledge
        .into_iter()
        .filter(|h| h.prompt_type == PromptType::Search)
        .chain(data)
        .collect();
    output.hypotheses = dedup_hypotheses(search);
    output.knowledge_count = output
        .hypotheses
        .iter()
        .filter(|h| h.origin == HypothesisOrigin::KnowledgeDriven)
        .count();
    output.data_count = output.hypotheses.len() - output.knowledge_count;
    Ok(output)
}

pub fn hypotheses_document(ctx: &TaskContext, seed: u64, output: &GenerationOutput) -> HypothesesDocument {
    HypothesesDocument {
        schema_version: SCHEMA_VERSION,
        context: ctx.clone(),
        seed,
        templates: generation_template_ids(),
        knowledge_count: output.knowledge_count,
        data_count: output.data_count,
        hypotheses: output.hypotheses.clone(),
        error_ledger: output.error_ledger.clone(),
    }
}

/// Looks up hypotheses by id, reporting every unknown id.
pub fn select_hypotheses(all: &[Hypothesis], ids: &[String]) -> Result<Vec<Hypothesis>, Vec<String>> {
    let by_id: HashMap<&str, &Hypothesis> = all.iter().map(|h| (h.hypothesis_id.as_str(), h)).collect();
    let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(missing);
    }
    Ok(ids.iter().map(|id| by_id[id.as_str()].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_normalized_query() {
        assert_eq!(hypothesis_id("Bicycle  at night"), hypothesis_id("bicycle at night"));
        assert_ne!(hypothesis_id("bicycle at night"), hypothesis_id("bicycle at dusk"));
        assert_eq!(hypothesis_id("x").len(), 14);
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("abc", 10), "abc");
    }

    #[test]
    fn none_detection() {
        assert!(is_none_value("'None'"));
        assert!(is_none_value(" none "));
        assert!(!is_none_value("nonetheless"));
    }
}
