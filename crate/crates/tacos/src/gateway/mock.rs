//! Deterministic stand-in backends for tests, examples, and offline runs.
//!
//! The planted mock reads markers that synthetic corpora embed in sample
//! text: `[topic=NAME]` in instructions drives tag assignment and
//! `[quality=NN]` in outputs drives comparative scores. Responses are a
//! pure function of (request text, seed), so reruns and cache replays
//! agree byte for byte.

use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, Purpose};
use crate::embed::fnv1a;

/// Backend from a closure. The closure must be thread-safe; gateway
/// batches call it concurrently.
pub struct FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    f: F,
    calls: AtomicU64,
}

impl<F> FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnBackend {
            f,
            calls: AtomicU64::new(0),
        }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(req)
    }
}

/// Panics if anything reaches the backend. Used to prove a warm-cache
/// run performs zero live calls.
pub struct PanickingBackend;

impl ChatBackend for PanickingBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        panic!(
            "backend reached on a run that must be fully cached (purpose {}, key {})",
            req.purpose,
            req.cache_key()
        );
    }
}

/// All `[key=VALUE]` marker values in `text`, in order of appearance.
pub fn extract_markers(text: &str, key: &str) -> Vec<String> {
    let needle = format!("[{key}=");
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(&needle) {
        let after = &rest[pos + needle.len()..];
        match after.find(']') {
            Some(end) => {
                out.push(after[..end].to_string());
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

fn mix(h: u64, salt: u64) -> u64 {
    fnv1a(&(h ^ salt.wrapping_mul(0x9e3779b97f4a7c15)).to_le_bytes())
}

fn title_case(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn planted_tags(user: &str, seed: u64) -> String {
    let topics = extract_markers(user, "topic");
    let Some(topic) = topics.first() else {
        return json!([{ "tag": "general", "explanation": "no recognizable domain" }]).to_string();
    };
    let h = mix(fnv1a(user.as_bytes()), seed);
    let surface = match h % 5 {
        0 => topic.clone(),
        1 => topic.to_uppercase(),
        2 => title_case(topic),
        3 => format!("{topic}!"),
        _ => format!("{topic}."),
    };
    let mut tags = vec![json!({
        "tag": surface,
        "explanation": format!("the request is about {topic}"),
    })];
    if mix(h, 1) % 10 < 6 {
        tags.push(json!({
            "tag": format!("{topic} tasks"),
            "explanation": format!("a task framed around {topic}"),
        }));
    }
    if mix(h, 2) % 10 < 2 {
        tags.push(json!({
            "tag": format!("stray {:08x}", mix(h, 3) as u32),
            "explanation": "an incidental detail",
        }));
    }
    json!(tags).to_string()
}

fn planted_scores(user: &str, position_bias: i64) -> String {
    let qualities = extract_markers(user, "quality");
    let parsed: Vec<i64> = qualities.iter().filter_map(|q| q.parse().ok()).collect();
    let (q1, q2) = match parsed.as_slice() {
        [a, b, ..] => (*a, *b),
        _ => (50, 50),
    };
    let s1 = (q1 + position_bias).clamp(1, 100);
    let s2 = q2.clamp(1, 100);
    json!({
        "score_1": s1,
        "score_2": s2,
        "feedback": format!("first answer merits {s1}, second {s2}"),
    })
    .to_string()
}

fn response_blocks(user: &str) -> Option<(String, String)> {
    let (_, rest) = user.split_once("### Response 1")?;
    let (a, rest) = rest.split_once("### Response 2")?;
    let b = match rest.split_once("### Verdict") {
        Some((b, _)) => b,
        None => rest,
    };
    Some((a.trim().to_string(), b.trim().to_string()))
}

fn length_verdict(user: &str) -> String {
    let winner = match response_blocks(user) {
        Some((a, b)) => {
            let (la, lb) = (a.chars().count(), b.chars().count());
            if la > lb {
                "1"
            } else if lb > la {
                "2"
            } else {
                "tie"
            }
        }
        None => "tie",
    };
    json!({ "winner": winner }).to_string()
}

/// Deterministic backend for planted corpora: tags from `[topic=..]`
/// markers, scores from `[quality=..]` markers (slot one inflated by
/// `position_bias`), verdicts by longer response.
pub fn planted_mock(seed: u64, position_bias: i64) -> impl ChatBackend {
    FnBackend::new(move |req: &ChatRequest| {
        Ok(match req.purpose {
            Purpose::Tagging => planted_tags(&req.user, seed),
            Purpose::Scoring => planted_scores(&req.user, position_bias),
            Purpose::Judging => length_verdict(&req.user),
        })
    })
}

/// Judge that prefers the longer response; ties on equal length.
pub fn length_judge() -> impl ChatBackend {
    FnBackend::new(|req: &ChatRequest| Ok(length_verdict(&req.user)))
}

/// Judge that always picks slot one. Under order-swapped judging this
/// yields a tie, which is how position-only preferences should land.
pub fn slot_one_judge() -> impl ChatBackend {
    FnBackend::new(|_: &ChatRequest| Ok(json!({ "winner": "1" }).to_string()))
}
