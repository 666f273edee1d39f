//! Open-domain tagging: ask an LLM to label every sample with free-form
//! tags.
//!
//! The tag space is deliberately unconstrained; normalization cleans it
//! up afterwards. Samples whose responses never parse keep an empty tag
//! list and are reported, not dropped; they surface later in the
//! untagged bucket.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, IftSample};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Purpose};
use crate::relaxed_json::parse_relaxed;

/// One tag as emitted by the model, before any normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTag {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

/// Per-sample tag state across the pipeline: raw tags from the tagger,
/// canonical tags once normalization has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagAnnotation {
    pub sample_id: String,
    pub raw_tags: Vec<RawTag>,
    #[serde(default)]
    pub normalized_tags: Vec<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TagParseError {
    #[error("no JSON payload found in tagger response")]
    NoJsonFound,
    #[error("tagger response parsed to an empty tag list")]
    EmptyTagList,
}

/// Per-sample raw tag lists are capped here after parsing; uncapped tag
/// counts would blow up downstream co-occurrence mining.
pub const MAX_TAGS_PER_SAMPLE: usize = 16;

#[derive(Debug, Clone)]
pub struct TaggingOptions {
    pub model: String,
    /// Re-prompts after the first failed parse. 2 means up to 3 attempts.
    pub max_tag_retries: u32,
}

impl Default for TaggingOptions {
    fn default() -> Self {
        TaggingOptions {
            model: "mock".into(),
            max_tag_retries: 2,
        }
    }
}

/// Samples whose responses never parsed, in dataset order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaggingReport {
    pub parse_failures: Vec<String>,
}

const TAG_SYSTEM: &str = "You are a data curator labeling instruction-tuning samples with open-domain tags.";

/// Prompt for one sample. A function of sample content only, so equal
/// content yields byte-identical prompts (and one shared cache entry).
pub fn build_tag_prompt(sample: &IftSample, model: &str) -> ChatRequest {
    let mut user = String::new();
    user.push_str("Instruction:\n");
    user.push_str(&sample.instruction);
    if !sample.input.is_empty() {
        user.push_str("\n\nInput:\n");
        user.push_str(&sample.input);
    }
    user.push_str("\n\nResponse:\n");
    user.push_str(&sample.output);
    user.push_str(
        "\n\nAssign 1 to 5 short tags capturing the task type, domain, and knowledge involved. \
         The tag space is open: any tag is allowed, invent whatever fits best. \
         Reply with only a JSON array of objects like \
         [{\"tag\": \"...\", \"explanation\": \"...\"}].",
    );
    ChatRequest::new(Purpose::Tagging, model, TAG_SYSTEM, user)
}

fn raw_tag_from_value(value: &serde_json::Value) -> Option<RawTag> {
    match value {
        serde_json::Value::String(s) => {
            let text = s.trim();
            (!text.is_empty()).then(|| RawTag {
                text: text.to_string(),
                explanation: None,
            })
        }
        serde_json::Value::Object(obj) => {
            let text = obj.get("tag")?.as_str()?.trim();
            if text.is_empty() {
                return None;
            }
            Some(RawTag {
                text: text.to_string(),
                explanation: obj
                    .get("explanation")
                    .and_then(|e| e.as_str())
                    .map(|e| e.to_string()),
            })
        }
        _ => None,
    }
}

/// Pull tags out of a model response: first balanced JSON payload,
/// tolerant of prose, fences, and trailing commas. Accepts
/// `[{"tag": ...}]`, bare string arrays, a single tag object, or a
/// `{"tags": [...]}` wrapper. Duplicate texts collapse to their first
/// appearance (case-sensitive).
pub fn parse_tag_response(text: &str) -> Result<Vec<RawTag>, TagParseError> {
    let value = parse_relaxed(text).ok_or(TagParseError::NoJsonFound)?;
    let items: Vec<serde_json::Value> = match value {
        serde_json::Value::Array(items) => items,
        serde_json::Value::Object(ref obj) => match obj.get("tags") {
            Some(serde_json::Value::Array(items)) => items.clone(),
            _ => vec![value],
        },
        other => vec![other],
    };
    let mut seen = std::collections::HashSet::new();
    let mut tags = Vec::new();
    for item in &items {
        if let Some(tag) = raw_tag_from_value(item) {
            if seen.insert(tag.text.clone()) {
                tags.push(tag);
                if tags.len() == MAX_TAGS_PER_SAMPLE {
                    break;
                }
            }
        }
    }
    if tags.is_empty() {
        return Err(TagParseError::EmptyTagList);
    }
    Ok(tags)
}

/// Tag every sample. Batched through the gateway; failed parses are
/// re-prompted up to `max_tag_retries` times with an attempt marker so
/// the retry is a distinct cache entry, then reported as failures.
pub fn tag_dataset(
    dataset: &Dataset,
    gateway: &Gateway,
    opts: &TaggingOptions,
) -> Result<(Vec<TagAnnotation>, TaggingReport), GatewayError> {
    let mut annotations: Vec<TagAnnotation> = dataset
        .samples
        .iter()
        .map(|s| TagAnnotation {
            sample_id: s.id.clone(),
            raw_tags: Vec::new(),
            normalized_tags: Vec::new(),
        })
        .collect();

    let mut pending: Vec<usize> = (0..dataset.samples.len()).collect();
    for attempt in 1..=opts.max_tag_retries + 1 {
        if pending.is_empty() {
            break;
        }
        let requests: Vec<ChatRequest> = pending
            .iter()
            .map(|&i| {
                let mut req = build_tag_prompt(&dataset.samples[i], &opts.model);
                if attempt > 1 {
                    req.user.push_str(&format!("\n\n[attempt={attempt}]"));
                }
                req
            })
            .collect();
        let results = gateway.complete_batch(&requests);
        let mut still_failing = Vec::new();
        for (&i, result) in pending.iter().zip(results) {
            let response = result?;
            match parse_tag_response(&response.text) {
                Ok(tags) => annotations[i].raw_tags = tags,
                Err(_) => still_failing.push(i),
            }
        }
        pending = still_failing;
    }

    let report = TaggingReport {
        parse_failures: pending
            .iter()
            .map(|&i| dataset.samples[i].id.clone())
            .collect(),
    };
    Ok((annotations, report))
}
