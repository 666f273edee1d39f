//! Head-to-head evaluation: position-swapped LLM judging with the
//! win-rate statistic, plus self-contained ROUGE and BLEU.
//!
//! Every instruction is judged twice, once per response order, and only
//! agreement in both orders produces a win or a loss; anything else is
//! a tie. Win rate is (#Win - #Lose) / Total + 1, so 1.0 means parity
//! and values above 1 favor side A.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Purpose};
use crate::relaxed_json::parse_relaxed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Tie,
    Lose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub instruction_id: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    /// Metric fields are null when no reference file was supplied.
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    pub rouge_l: Option<f64>,
    pub bleu: Option<f64>,
    pub excluded_unjudgeable: usize,
    /// Ids missing a response on either side.
    pub skipped_incomplete: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instructions were judged")]
    EmptyTotal,
    #[error("instruction {id}: judge response unusable after {attempts} attempts: {last}")]
    Unjudgeable {
        id: String,
        attempts: u32,
        last: String,
    },
    #[error("{path}:{line}: {message}")]
    ResponseFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct JudgeOptions {
    pub model: String,
    pub max_judge_retries: u32,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        JudgeOptions {
            model: "mock".into(),
            max_judge_retries: 2,
        }
    }
}

/// Win rate per the (#Win - #Lose) / Total + 1 convention: 1.0 is
/// parity, 2.0 is a clean sweep, 0.0 a total loss.
pub fn win_rate(wins: usize, ties: usize, losses: usize) -> Result<f64, EvalError> {
    let total = wins + ties + losses;
    if total == 0 {
        return Err(EvalError::EmptyTotal);
    }
    Ok((wins as f64 - losses as f64) / total as f64 + 1.0)
}

const JUDGE_SYSTEM: &str = "You are an impartial judge of instruction-following quality. Compare the two responses to the instruction and decide which answers it better. Respond with JSON only.";

fn build_judge_prompt(instruction: &str, first: &str, second: &str, model: &str) -> ChatRequest {
    let user = format!(
        "### Instruction\n{instruction}\n\n### Response 1\n{first}\n\n### Response 2\n{second}\n\n\
         ### Verdict\nPick the response that answers the instruction better, judging helpfulness, \
         accuracy, and completeness. Reply with exactly one JSON object: {{\"winner\": \"1\"}} or \
         {{\"winner\": \"2\"}} or {{\"winner\": \"tie\"}}"
    );
    ChatRequest::new(Purpose::Judging, model, JUDGE_SYSTEM, user)
}

/// One order's opinion: which slot won.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotVote {
    Slot1,
    Slot2,
    Tie,
}

fn parse_verdict(text: &str) -> Result<SlotVote, String> {
    let value = parse_relaxed(text).ok_or("no JSON object in verdict")?;
    let winner = value
        .get("winner")
        .ok_or("verdict object lacks \"winner\"")?;
    let label = match winner {
        serde_json::Value::String(s) => s.trim().to_lowercase(),
        serde_json::Value::Number(n) => n.to_string(),
        other => other.to_string(),
    };
    match label.as_str() {
        "1" => Ok(SlotVote::Slot1),
        "2" => Ok(SlotVote::Slot2),
        "tie" => Ok(SlotVote::Tie),
        other => Err(format!("unexpected winner {other:?}")),
    }
}

fn judged_direction(
    instruction: &str,
    first: &str,
    second: &str,
    gateway: &Gateway,
    opts: &JudgeOptions,
) -> Result<Result<SlotVote, String>, GatewayError> {
    let base = build_judge_prompt(instruction, first, second, &opts.model);
    let mut last = String::from("no attempts made");
    for attempt in 1..=(opts.max_judge_retries + 1) {
        let mut req = base.clone();
        if attempt > 1 {
            req.user.push_str(&format!("\n\n[attempt={attempt}]"));
        }
        let resp = gateway.complete(&req)?;
        match parse_verdict(&resp.text) {
            Ok(vote) => return Ok(Ok(vote)),
            Err(e) => last = e,
        }
    }
    Ok(Err(last))
}

fn is_blank(text: &str) -> bool {
    text.trim().is_empty()
}

/// Judge A against B in both presentation orders. A wins only when both
/// orders prefer it; same for losing; everything else is a tie. A blank
/// response loses outright without consulting the judge, and two blanks
/// tie.
pub fn judge_pair_swapped(
    instruction_id: &str,
    instruction: &str,
    resp_a: &str,
    resp_b: &str,
    gateway: &Gateway,
    opts: &JudgeOptions,
) -> Result<Verdict, EvalError> {
    let verdict = |outcome| Verdict {
        instruction_id: instruction_id.to_string(),
        outcome,
    };
    match (is_blank(resp_a), is_blank(resp_b)) {
        (true, true) => return Ok(verdict(Outcome::Tie)),
        (true, false) => return Ok(verdict(Outcome::Lose)),
        (false, true) => return Ok(verdict(Outcome::Win)),
        (false, false) => {}
    }

    let unjudgeable = |last: String| EvalError::Unjudgeable {
        id: instruction_id.to_string(),
        attempts: opts.max_judge_retries + 1,
        last,
    };
    let ab = judged_direction(instruction, resp_a, resp_b, gateway, opts)?.map_err(unjudgeable)?;
    let ba = judged_direction(instruction, resp_b, resp_a, gateway, opts)?
        .map_err(|last| EvalError::Unjudgeable {
            id: instruction_id.to_string(),
            attempts: opts.max_judge_retries + 1,
            last,
        })?;

    let a_wins_ab = ab == SlotVote::Slot1;
    let a_wins_ba = ba == SlotVote::Slot2;
    let b_wins_ab = ab == SlotVote::Slot2;
    let b_wins_ba = ba == SlotVote::Slot1;
    let outcome = if a_wins_ab && a_wins_ba {
        Outcome::Win
    } else if b_wins_ab && b_wins_ba {
        Outcome::Lose
    } else {
        Outcome::Tie
    };
    Ok(verdict(outcome))
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.to_string())
        .collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n && n > 0 {
        for window in toks.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    counts
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 over lowercased whitespace tokens with clipped n-gram
/// counts. Zero when either side has no n-grams.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let cand = ngram_counts(&tokens(candidate), n);
    let refs = ngram_counts(&tokens(reference), n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let overlap: usize = cand
        .iter()
        .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    f1(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the token-level longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = tokens(candidate);
    let refs = tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refs);
    f1(lcs as f64 / cand.len() as f64, lcs as f64 / refs.len() as f64)
}

/// BLEU-4: geometric mean of modified n-gram precisions, add-1
/// smoothing for n >= 2, times the brevity penalty. Zero for an empty
/// candidate.
pub fn bleu(candidate: &str, reference: &str) -> f64 {
    let cand = tokens(candidate);
    let refs = tokens(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for n in 1..=4usize {
        let cand_grams = ngram_counts(&cand, n);
        let ref_grams = ngram_counts(&refs, n);
        let total: usize = cand_grams.values().sum();
        let matched: usize = cand_grams
            .iter()
            .map(|(g, c)| (*c).min(ref_grams.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let precision = (log_sum / 4.0).exp();
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let score = brevity * precision;
    // Identity and other all-perfect cases must land on 1.0 exactly,
    // not within rounding of it.
    if score > 1.0 {
        1.0
    } else {
        score
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ResponseRecord {
    id: String,
    response: String,
}

/// Load a JSONL response file ({"id", "response"} per line) into an
/// id-keyed map. Duplicate ids and malformed lines are errors.
pub fn load_responses(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord =
            serde_json::from_str(line).map_err(|e| EvalError::ResponseFile {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if map.insert(rec.id.clone(), rec.response).is_some() {
            return Err(EvalError::ResponseFile {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
    }
    Ok(map)
}

/// Judge responses_a against responses_b over every instruction both
/// sides answered, then attach reference metrics for side A when a
/// reference map is given. Unjudgeable instructions are excluded and
/// counted, not fatal.
pub fn evaluate(
    instructions: &BTreeMap<String, String>,
    responses_a: &BTreeMap<String, String>,
    responses_b: &BTreeMap<String, String>,
    references: Option<&BTreeMap<String, String>>,
    gateway: &Gateway,
    opts: &JudgeOptions,
) -> Result<(EvalReport, Vec<Verdict>), EvalError> {
    let mut judgeable: Vec<(&String, &String, &String)> = Vec::new();
    let mut skipped_incomplete = 0usize;
    for (id, instruction) in instructions {
        match (responses_a.get(id), responses_b.get(id)) {
            (Some(a), Some(b)) => judgeable.push((id, a, b)),
            _ => skipped_incomplete += 1,
        }
        let _ = instruction;
    }

    let slots: Vec<Mutex<Option<Result<Verdict, EvalError>>>> =
        judgeable.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = gateway.config().max_concurrency.min(judgeable.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= judgeable.len() {
                    break;
                }
                let (id, a, b) = judgeable[i];
                let result =
                    judge_pair_swapped(id, &instructions[id.as_str()], a, b, gateway, opts);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut verdicts = Vec::new();
    let mut excluded_unjudgeable = 0usize;
    for slot in slots {
        match slot.into_inner().unwrap().expect("worker filled every slot") {
            Ok(v) => verdicts.push(v),
            Err(EvalError::Unjudgeable { .. }) => excluded_unjudgeable += 1,
            Err(e) => return Err(e),
        }
    }

    let wins = verdicts.iter().filter(|v| v.outcome == Outcome::Win).count();
    let ties = verdicts.iter().filter(|v| v.outcome == Outcome::Tie).count();
    let losses = verdicts.iter().filter(|v| v.outcome == Outcome::Lose).count();
    let rate = win_rate(wins, ties, losses)?;

    let metrics = references.map(|refs| {
        let mut rows = 0usize;
        let (mut r1, mut r2, mut rl, mut bl) = (0.0, 0.0, 0.0, 0.0);
        for (id, reference) in refs {
            if let Some(candidate) = responses_a.get(id) {
                rows += 1;
                r1 += rouge_n(candidate, reference, 1);
                r2 += rouge_n(candidate, reference, 2);
                rl += rouge_l(candidate, reference);
                bl += bleu(candidate, reference);
            }
        }
        if rows == 0 {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let n = rows as f64;
            (r1 / n, r2 / n, rl / n, bl / n)
        }
    });

    let report = EvalReport {
        wins,
        ties,
        losses,
        win_rate: rate,
        rouge1: metrics.map(|m| m.0),
        rouge2: metrics.map(|m| m.1),
        rouge_l: metrics.map(|m| m.2),
        bleu: metrics.map(|m| m.3),
        excluded_unjudgeable,
        skipped_incomplete,
    };
    Ok((report, verdicts))
}
