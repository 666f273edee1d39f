//! Pairwise comparative scoring with swap-and-rescore.
//!
//! Samples inside a cluster are compared head to head on a [1,100]
//! scale. Every pair is judged twice, once per presentation order, and
//! both scores count, so a judge that favors one slot by a constant
//! inflates every sample equally and the mean differences stay honest.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Assignment, Clustering};
use crate::corpus::{Dataset, IftSample};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Purpose};
use crate::relaxed_json::parse_relaxed;

/// Mean recorded for samples that never entered a comparison.
pub const SENTINEL_UNSCORED: f64 = -1.0;

/// Both-direction scores for one pair. `forward` comes from prompt
/// order (a,b); `reverse` comes from prompt order (b,a) with the scores
/// mapped back, so index 0 always belongs to sample `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub forward: (i64, i64),
    pub reverse: (i64, i64),
    pub consistent: bool,
}

impl PairScore {
    pub fn mean_a(&self) -> f64 {
        (self.forward.0 + self.reverse.0) as f64 / 2.0
    }

    pub fn mean_b(&self) -> f64 {
        (self.forward.1 + self.reverse.1) as f64 / 2.0
    }

    /// Orders agree when neither direction flips the sign of the score
    /// difference; a tie in either direction never counts as a flip.
    pub fn orders_agree(forward: (i64, i64), reverse: (i64, i64)) -> bool {
        let fd = forward.0 - forward.1;
        let rd = reverse.0 - reverse.1;
        fd == 0 || rd == 0 || (fd > 0) == (rd > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggScore {
    pub sample_id: String,
    pub mean: f64,
    pub n_comparisons: usize,
    pub flagged_inconsistent: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreParseError {
    #[error("no JSON object found in score response")]
    NoJsonFound,
    #[error("score response lacks integer field {field:?}")]
    MissingField { field: String },
    #[error("score {field} = {value} outside [1,100]")]
    ScoreOutOfRange { field: String, value: i64 },
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("pair ({a}, {b}) unscorable after {attempts} attempts: {last}")]
    Unscorable {
        a: String,
        b: String,
        attempts: u32,
        last: ScoreParseError,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct ScoringOptions {
    pub model: String,
    pub rounds: usize,
    pub round_robin_cap: usize,
    pub seed: u64,
    /// Re-judge both directions once when the orders disagree and use
    /// the second opinion.
    pub rescore_inconsistent: bool,
    /// Extra prompts after a malformed response, per direction.
    pub max_score_retries: u32,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            model: "mock".into(),
            rounds: 3,
            round_robin_cap: 8,
            seed: 0,
            rescore_inconsistent: false,
            max_score_retries: 2,
        }
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ScoringReport {
    /// Pairs dropped after retries, as (a, b, reason).
    pub unscorable: Vec<(String, String, String)>,
    pub pairs_scored: usize,
}

/// Comparison schedule for one cluster. Small clusters get the complete
/// graph; larger ones get `rounds` disjoint rounds of a seeded
/// round-robin tournament, so no pair repeats and every member sits out
/// at most one selected round.
pub fn schedule_pairs(
    members: &[String],
    rounds: usize,
    round_robin_cap: usize,
    seed: u64,
) -> Vec<(String, String)> {
    let mut sorted: Vec<&String> = members.iter().collect();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if n < 2 {
        return Vec::new();
    }

    let mut pairs = Vec::new();
    if n <= round_robin_cap {
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((sorted[i].clone(), sorted[j].clone()));
            }
        }
        return pairs;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // Circle method: participant m-1 is a phantom bye when n is odd.
    let m = if n % 2 == 0 { n } else { n + 1 };
    let rounds = rounds.min(m - 1);
    for r in 0..rounds {
        let participant = |slot: usize| -> usize {
            if slot == 0 {
                0
            } else {
                1 + (slot - 1 + r) % (m - 1)
            }
        };
        for p in 0..m / 2 {
            let x = participant(p);
            let y = participant(m - 1 - p);
            if x >= n || y >= n {
                continue;
            }
            pairs.push((sorted[order[x]].clone(), sorted[order[y]].clone()));
        }
    }
    pairs
}

const SCORE_SYSTEM: &str = "You are a strict data quality rater for instruction-tuning samples. You compare two samples and score each one independently. Respond with JSON only.";

fn sample_block(slot: usize, sample: &IftSample) -> String {
    let mut block = format!("### Sample {slot}\nInstruction:\n{}", sample.instruction);
    if !sample.input.is_empty() {
        block.push_str("\n\nInput:\n");
        block.push_str(&sample.input);
    }
    block.push_str("\n\nResponse:\n");
    block.push_str(&sample.output);
    block
}

/// Pairwise scoring prompt. Swapping the arguments reorders the two
/// sample blocks and changes nothing else. Sample ids stay out of the
/// prompt so equal content yields equal cache keys.
pub fn build_score_prompt(a: &IftSample, b: &IftSample, model: &str) -> ChatRequest {
    let user = format!(
        "Compare the two instruction-tuning samples below.\n\n{}\n\n{}\n\n### Scoring requirements\n\
         Rate each sample for helpfulness of the response, factual accuracy, and how well the response follows the instruction. \
         Penalize refusals, filler, and responses that ignore the given input. \
         Assign each sample an integer score on a range of 1 to 100, where 1 is unusable and 100 is flawless.\n\n\
         Reply with exactly one JSON object: {{\"score_1\": <int>, \"score_2\": <int>, \"feedback\": \"<short rationale>\"}}",
        sample_block(1, a),
        sample_block(2, b),
    );
    ChatRequest::new(Purpose::Scoring, model, SCORE_SYSTEM, user)
}

fn integer_field(obj: &serde_json::Map<String, serde_json::Value>, field: &str) -> Result<i64, ScoreParseError> {
    let value = obj
        .get(field)
        .and_then(|v| v.as_i64())
        .ok_or_else(|| ScoreParseError::MissingField { field: field.into() })?;
    if !(1..=100).contains(&value) {
        return Err(ScoreParseError::ScoreOutOfRange {
            field: field.into(),
            value,
        });
    }
    Ok(value)
}

/// Pulls (score_1, score_2) out of a judge response. Accepts prose or
/// code fences around the object; scores must be integers in [1,100].
pub fn parse_score_response(text: &str) -> Result<(i64, i64), ScoreParseError> {
    let value = parse_relaxed(text).ok_or(ScoreParseError::NoJsonFound)?;
    let obj = value.as_object().ok_or(ScoreParseError::NoJsonFound)?;
    Ok((integer_field(obj, "score_1")?, integer_field(obj, "score_2")?))
}

fn scored_direction(
    first: &IftSample,
    second: &IftSample,
    gateway: &Gateway,
    opts: &ScoringOptions,
    rescore: bool,
) -> Result<Result<(i64, i64), ScoreParseError>, GatewayError> {
    let base = build_score_prompt(first, second, &opts.model);
    let mut last = ScoreParseError::NoJsonFound;
    for attempt in 1..=(opts.max_score_retries + 1) {
        let mut req = base.clone();
        if rescore {
            req.user.push_str("\n\n[rescore]");
        }
        if attempt > 1 {
            req.user.push_str(&format!("\n\n[attempt={attempt}]"));
        }
        let resp = gateway.complete(&req)?;
        match parse_score_response(&resp.text) {
            Ok(scores) => return Ok(Ok(scores)),
            Err(e) => last = e,
        }
    }
    Ok(Err(last))
}

/// Judge the pair in both presentation orders and map the reverse
/// scores back to the samples. Optionally takes a second opinion when
/// the two orders disagree on the winner.
pub fn score_pair_swapped(
    a: &IftSample,
    b: &IftSample,
    gateway: &Gateway,
    opts: &ScoringOptions,
) -> Result<PairScore, ScoreError> {
    assert_ne!(a.id, b.id, "a pair must join two distinct samples");
    let judge = |rescore: bool| -> Result<PairScore, ScoreError> {
        let forward = scored_direction(a, b, gateway, opts, rescore)?.map_err(|last| {
            ScoreError::Unscorable {
                a: a.id.clone(),
                b: b.id.clone(),
                attempts: opts.max_score_retries + 1,
                last,
            }
        })?;
        let (rev_b, rev_a) = scored_direction(b, a, gateway, opts, rescore)?.map_err(|last| {
            ScoreError::Unscorable {
                a: a.id.clone(),
                b: b.id.clone(),
                attempts: opts.max_score_retries + 1,
                last,
            }
        })?;
        let reverse = (rev_a, rev_b);
        Ok(PairScore {
            a: a.id.clone(),
            b: b.id.clone(),
            forward,
            reverse,
            consistent: PairScore::orders_agree(forward, reverse),
        })
    };
    let first = judge(false)?;
    if !first.consistent && opts.rescore_inconsistent {
        return judge(true);
    }
    Ok(first)
}

/// Per-sample means over every score received in every pair, both
/// directions. Samples absent from all pairs are absent from the map.
pub fn aggregate_scores(pairs: &[PairScore]) -> BTreeMap<String, AggScore> {
    struct Acc {
        total: i64,
        scores: usize,
        pairs: usize,
        inconsistent: usize,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    let mut add = |id: &str, scores: [i64; 2], inconsistent: bool| {
        let e = acc.entry(id.to_string()).or_insert(Acc {
            total: 0,
            scores: 0,
            pairs: 0,
            inconsistent: 0,
        });
        e.total += scores[0] + scores[1];
        e.scores += 2;
        e.pairs += 1;
        e.inconsistent += inconsistent as usize;
    };
    for p in pairs {
        add(&p.a, [p.forward.0, p.reverse.0], !p.consistent);
        add(&p.b, [p.forward.1, p.reverse.1], !p.consistent);
    }
    acc.into_iter()
        .map(|(id, a)| {
            (
                id.clone(),
                AggScore {
                    sample_id: id,
                    mean: a.total as f64 / a.scores as f64,
                    n_comparisons: a.pairs,
                    flagged_inconsistent: a.inconsistent,
                },
            )
        })
        .collect()
}

/// Score every cluster of a clustering: schedule pairs per cluster with
/// a seed derived from (seed, cluster), judge them concurrently, and
/// aggregate. Samples that never entered a pair, untagged ones
/// included, get the unscored sentinel so downstream stages see every
/// sample. Unscorable pairs are dropped and reported.
pub fn score_clusters(
    clustering: &Clustering,
    dataset: &Dataset,
    gateway: &Gateway,
    opts: &ScoringOptions,
) -> Result<(Vec<PairScore>, BTreeMap<String, AggScore>, ScoringReport), GatewayError> {
    let by_id: BTreeMap<&str, &IftSample> =
        dataset.samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut scheduled: Vec<(String, String)> = Vec::new();
    for c in 0..clustering.k {
        let members: Vec<String> = clustering
            .sample_assignment
            .iter()
            .filter(|(_, &a)| a == Assignment::Cluster(c))
            .map(|(id, _)| id.clone())
            .collect();
        let cluster_seed = opts
            .seed
            .wrapping_add((c as u64).wrapping_mul(0x9E3779B97F4A7C15));
        scheduled.extend(schedule_pairs(&members, opts.rounds, opts.round_robin_cap, cluster_seed));
    }

    let slots: Vec<Mutex<Option<Result<PairScore, ScoreError>>>> =
        scheduled.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = gateway.config().max_concurrency.min(scheduled.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= scheduled.len() {
                    break;
                }
                let (ida, idb) = &scheduled[i];
                let a = by_id.get(ida.as_str()).expect("scheduled sample exists");
                let b = by_id.get(idb.as_str()).expect("scheduled sample exists");
                let result = score_pair_swapped(a, b, gateway, opts);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut pairs = Vec::new();
    let mut report = ScoringReport::default();
    for (slot, (ida, idb)) in slots.into_iter().zip(&scheduled) {
        match slot.into_inner().unwrap().expect("worker filled every slot") {
            Ok(p) => pairs.push(p),
            Err(ScoreError::Gateway(e)) => return Err(e),
            Err(e @ ScoreError::Unscorable { .. }) => {
                report
                    .unscorable
                    .push((ida.clone(), idb.clone(), e.to_string()));
            }
        }
    }
    report.pairs_scored = pairs.len();

    let mut agg = aggregate_scores(&pairs);
    let scored: BTreeSet<&String> = agg.keys().collect();
    let sentinels: Vec<String> = clustering
        .sample_assignment
        .keys()
        .filter(|id| !scored.contains(id))
        .cloned()
        .collect();
    for id in sentinels {
        agg.insert(
            id.clone(),
            AggScore {
                sample_id: id,
                mean: SENTINEL_UNSCORED,
                n_comparisons: 0,
                flagged_inconsistent: 0,
            },
        );
    }
    Ok((pairs, agg, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{assign_samples, kmeans};
    use crate::embed::hash_embed;
    use crate::gateway::mock::{extract_markers, planted_mock, FnBackend};
    use crate::gateway::ChatBackend;
    use crate::tagging::TagAnnotation;

    fn sample(id: &str, quality: i64) -> IftSample {
        IftSample {
            id: id.into(),
            instruction: format!("Summarize item {id}."),
            input: String::new(),
            output: format!("[quality={quality}] summary for {id}"),
            source: "test".into(),
        }
    }

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn small_cluster_gets_complete_graph() {
        let members = ids(&["s1", "s2", "s3", "s4"]);
        let pairs = schedule_pairs(&members, 3, 8, 0);
        assert_eq!(pairs.len(), 6);
        let unordered: BTreeSet<(String, String)> = pairs
            .iter()
            .map(|(a, b)| (a.min(b).clone(), a.max(b).clone()))
            .collect();
        assert_eq!(unordered.len(), 6);
    }

    #[test]
    fn tiny_clusters_produce_no_pairs() {
        assert!(schedule_pairs(&ids(&["only"]), 3, 8, 0).is_empty());
        assert!(schedule_pairs(&[], 3, 8, 0).is_empty());
    }

    #[test]
    fn large_cluster_rounds_have_no_duplicates() {
        let members: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let pairs = schedule_pairs(&members, 3, 8, 42);
        // Even count: three perfect matchings of 10 pairs each.
        assert_eq!(pairs.len(), 30);
        let unordered: BTreeSet<(String, String)> = pairs
            .iter()
            .map(|(a, b)| (a.min(b).clone(), a.max(b).clone()))
            .collect();
        assert_eq!(unordered.len(), 30, "no pair repeats");
        let mut appearances: BTreeMap<&str, usize> = BTreeMap::new();
        for (a, b) in &pairs {
            assert_ne!(a, b, "never pair a sample with itself");
            *appearances.entry(a).or_default() += 1;
            *appearances.entry(b).or_default() += 1;
        }
        for (id, n) in appearances {
            assert!(n >= 2, "{id} appears only {n} times");
        }
    }

    #[test]
    fn odd_count_rotates_the_bye() {
        let members: Vec<String> = (0..21).map(|i| format!("s{i:02}")).collect();
        let pairs = schedule_pairs(&members, 3, 8, 7);
        assert_eq!(pairs.len(), 30);
        let mut appearances: BTreeMap<&str, usize> = BTreeMap::new();
        for (a, b) in &pairs {
            *appearances.entry(a).or_default() += 1;
            *appearances.entry(b).or_default() += 1;
        }
        // One member sits out per round and the bye never repeats.
        let byes: Vec<&str> = members
            .iter()
            .map(|m| m.as_str())
            .filter(|m| appearances.get(m).copied().unwrap_or(0) == 2)
            .collect();
        assert_eq!(byes.len(), 3);
        for (_, n) in appearances {
            assert!(n >= 2);
        }
    }

    #[test]
    fn schedule_is_seed_deterministic() {
        let members: Vec<String> = (0..15).map(|i| format!("s{i:02}")).collect();
        assert_eq!(
            schedule_pairs(&members, 3, 8, 9),
            schedule_pairs(&members, 3, 8, 9)
        );
        assert_ne!(
            schedule_pairs(&members, 3, 8, 9),
            schedule_pairs(&members, 3, 8, 10)
        );
    }

    #[test]
    fn prompt_swap_reorders_blocks_only() {
        let a = sample("a", 70);
        let b = sample("b", 60);
        let ab = build_score_prompt(&a, &b, "m");
        let ba = build_score_prompt(&b, &a, "m");
        assert_eq!(ab.purpose, Purpose::Scoring);
        assert_eq!(ab.temperature, 0.0);
        assert!(ab.user.contains(" 1 ") || ab.user.contains("1 to 100"));
        assert!(ab.user.contains("100"));
        for field in ["score_1", "score_2", "feedback"] {
            assert!(ab.user.contains(field));
        }
        // Block order flips with the arguments, block content does not.
        let pos = |hay: &str, needle: &str| hay.find(needle).unwrap();
        assert!(pos(&ab.user, &a.output) < pos(&ab.user, &b.output));
        assert!(pos(&ba.user, &b.output) < pos(&ba.user, &a.output));
        let tail = |s: &str| s[pos(s, "### Scoring requirements")..].to_string();
        assert_eq!(tail(&ab.user), tail(&ba.user));

        let named = IftSample {
            id: "corpus-9f41c2".into(),
            instruction: "Do the thing.".into(),
            input: String::new(),
            output: "Done.".into(),
            source: "test".into(),
        };
        let req = build_score_prompt(&named, &b, "m");
        assert!(!req.user.contains(&named.id), "sample ids stay out of prompts");
    }

    #[test]
    fn identical_samples_still_render() {
        let a = sample("a", 70);
        let req = build_score_prompt(&a, &a, "m");
        assert_eq!(req.user.matches("Summarize item a.").count(), 2);
    }

    #[test]
    fn parses_plain_and_fenced_scores() {
        assert_eq!(
            parse_score_response(r#"{"score_1": 80, "score_2": 60, "feedback": "ok"}"#).unwrap(),
            (80, 60)
        );
        let fenced = "Here you go:\n```json\n{\"score_1\": 12, \"score_2\": 99, \"feedback\": \"x\"}\n```";
        assert_eq!(parse_score_response(fenced).unwrap(), (12, 99));
    }

    #[test]
    fn score_bounds_are_enforced() {
        assert_eq!(
            parse_score_response(r#"{"score_1": 0, "score_2": 60}"#).unwrap_err(),
            ScoreParseError::ScoreOutOfRange {
                field: "score_1".into(),
                value: 0
            }
        );
        assert_eq!(
            parse_score_response(r#"{"score_1": 50, "score_2": 101}"#).unwrap_err(),
            ScoreParseError::ScoreOutOfRange {
                field: "score_2".into(),
                value: 101
            }
        );
    }

    #[test]
    fn missing_or_fractional_fields_are_rejected() {
        assert_eq!(
            parse_score_response(r#"{"score_1": 50}"#).unwrap_err(),
            ScoreParseError::MissingField {
                field: "score_2".into()
            }
        );
        assert_eq!(
            parse_score_response(r#"{"score_1": 55.5, "score_2": 60}"#).unwrap_err(),
            ScoreParseError::MissingField {
                field: "score_1".into()
            }
        );
        assert_eq!(
            parse_score_response("I refuse to answer.").unwrap_err(),
            ScoreParseError::NoJsonFound
        );
    }

    #[test]
    fn pair_score_arithmetic_matches_hand_calcs() {
        let consistent = PairScore {
            a: "a".into(),
            b: "b".into(),
            forward: (80, 60),
            reverse: (70, 65),
            consistent: PairScore::orders_agree((80, 60), (70, 65)),
        };
        assert_eq!(consistent.mean_a(), 75.0);
        assert_eq!(consistent.mean_b(), 62.5);
        assert!(consistent.consistent);

        assert!(!PairScore::orders_agree((80, 60), (50, 65)), "sign flip");
        assert!(PairScore::orders_agree((80, 60), (70, 70)), "a tie is not a flip");
        assert!(PairScore::orders_agree((60, 60), (10, 90)), "tie first");
    }

    #[test]
    fn swapped_scoring_cancels_position_bias() {
        let a = sample("a", 70);
        let b = sample("b", 60);
        let gw = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
        let p = score_pair_swapped(&a, &b, &gw, &ScoringOptions::default()).unwrap();
        assert_eq!(p.forward, (80, 60));
        assert_eq!(p.reverse, (70, 70));
        assert_eq!(p.mean_a(), 75.0);
        assert_eq!(p.mean_b(), 65.0);
        assert_eq!(p.mean_a() - p.mean_b(), 10.0, "bias cancels exactly");
        assert!(p.consistent);
    }

    #[test]
    fn swap_symmetry_of_contributions() {
        let a = sample("a", 41);
        let b = sample("b", 87);
        let gw = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
        let opts = ScoringOptions::default();
        let ab = aggregate_scores(&[score_pair_swapped(&a, &b, &gw, &opts).unwrap()]);
        let ba = aggregate_scores(&[score_pair_swapped(&b, &a, &gw, &opts).unwrap()]);
        assert_eq!(ab["a"].mean, ba["a"].mean);
        assert_eq!(ab["b"].mean, ba["b"].mean);
    }

    #[test]
    fn bias_cancellation_over_many_pairs() {
        let gw = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
        let opts = ScoringOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let qa = rand::Rng::random_range(&mut rng, 1..=89);
            let qb = rand::Rng::random_range(&mut rng, 1..=89);
            let a = sample("a", qa);
            let b = sample("b", qb);
            let p = score_pair_swapped(&a, &b, &gw, &opts).unwrap();
            assert_eq!(p.mean_a() - p.mean_b(), (qa - qb) as f64);
        }
    }

    #[test]
    fn aggregation_means_and_counts() {
        let p1 = PairScore {
            a: "a".into(),
            b: "b".into(),
            forward: (80, 60),
            reverse: (70, 65),
            consistent: true,
        };
        let agg = aggregate_scores(&[p1.clone()]);
        assert_eq!(agg["a"].mean, 75.0);
        assert_eq!(agg["a"].n_comparisons, 1);
        assert_eq!(agg["b"].mean, 62.5);

        // One sample in two pairs, received scores {80,70,90,85}.
        let p2 = PairScore {
            a: "a".into(),
            b: "c".into(),
            forward: (90, 50),
            reverse: (85, 55),
            consistent: false,
        };
        let agg = aggregate_scores(&[p1, p2]);
        assert_eq!(agg["a"].mean, 81.25);
        assert_eq!(agg["a"].n_comparisons, 2);
        assert_eq!(agg["a"].flagged_inconsistent, 1);
        assert!(aggregate_scores(&[]).is_empty());
    }

    #[test]
    fn malformed_responses_retry_then_succeed() {
        let backend = FnBackend::new(|req: &ChatRequest| {
            if req.user.contains("[attempt=2]") {
                Ok(r#"{"score_1": 30, "score_2": 40, "feedback": "second try"}"#.into())
            } else {
                Ok("no json here".into())
            }
        });
        let a = sample("a", 1);
        let b = sample("b", 2);
        let gw = Gateway::ephemeral(Box::new(backend));
        let p = score_pair_swapped(&a, &b, &gw, &ScoringOptions::default()).unwrap();
        assert_eq!(p.forward, (30, 40));
        assert_eq!(p.reverse, (40, 30));
        assert_eq!(gw.backend_calls(), 4, "two attempts per direction");
    }

    #[test]
    fn hopeless_responses_become_unscorable() {
        let backend = FnBackend::new(|_: &ChatRequest| Ok("still no json".into()));
        let a = sample("a", 1);
        let b = sample("b", 2);
        let gw = Gateway::ephemeral(Box::new(backend));
        let err = score_pair_swapped(&a, &b, &gw, &ScoringOptions::default()).unwrap_err();
        match err {
            ScoreError::Unscorable { attempts, last, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(last, ScoreParseError::NoJsonFound);
            }
            other => panic!("expected Unscorable, got {other:?}"),
        }
        assert_eq!(gw.backend_calls(), 3, "forward direction exhausts, reverse never starts");
    }

    #[test]
    fn rescore_replaces_inconsistent_verdicts() {
        // First opinion flips the winner between orders; the rescore
        // round agrees with itself.
        let backend = FnBackend::new(|req: &ChatRequest| {
            let rescored = req.user.contains("[rescore]");
            let first = extract_markers(&req.user, "quality")[0].clone();
            let one_first = first == "70";
            let body = match (rescored, one_first) {
                (false, true) => r#"{"score_1": 80, "score_2": 60, "feedback": ""}"#,
                (false, false) => r#"{"score_1": 75, "score_2": 50, "feedback": ""}"#,
                (true, true) => r#"{"score_1": 81, "score_2": 61, "feedback": ""}"#,
                (true, false) => r#"{"score_1": 59, "score_2": 79, "feedback": ""}"#,
            };
            Ok(body.into())
        });
        let a = sample("a", 70);
        let b = sample("b", 60);
        let gw = Gateway::ephemeral(Box::new(backend));

        let stay = ScoringOptions::default();
        let p = score_pair_swapped(&a, &b, &gw, &stay).unwrap();
        assert!(!p.consistent, "first opinion disagrees with itself");
        assert_eq!(p.forward, (80, 60));

        let redo = ScoringOptions {
            rescore_inconsistent: true,
            ..ScoringOptions::default()
        };
        let p = score_pair_swapped(&a, &b, &gw, &redo).unwrap();
        assert_eq!(p.forward, (81, 61));
        assert_eq!(p.reverse, (79, 59));
        assert!(p.consistent);
    }

    fn planted_world(
        qualities: &[(&str, i64, &str)],
    ) -> (Dataset, Clustering, BTreeMap<String, crate::embed::TagVector>) {
        let samples: Vec<IftSample> = qualities
            .iter()
            .map(|(id, q, _)| sample(id, *q))
            .collect();
        let dataset = Dataset {
            name: "scoring-test".into(),
            samples,
        };
        let tags: BTreeSet<String> = qualities.iter().map(|(_, _, t)| t.to_string()).collect();
        let vectors: BTreeMap<String, crate::embed::TagVector> = tags
            .iter()
            .map(|t| (t.clone(), hash_embed(t, 16)))
            .collect();
        let mut clustering = kmeans(&vectors, tags.len(), 0).unwrap();
        let annotations: Vec<TagAnnotation> = qualities
            .iter()
            .map(|(id, _, t)| TagAnnotation {
                sample_id: id.to_string(),
                raw_tags: Vec::new(),
                normalized_tags: vec![t.to_string()],
            })
            .collect();
        assign_samples(&mut clustering, &annotations, &vectors).unwrap();
        (dataset, clustering, vectors)
    }

    #[test]
    fn cluster_scoring_covers_everyone() {
        let (dataset, clustering, _) = planted_world(&[
            ("s1", 80, "alpha"),
            ("s2", 60, "alpha"),
            ("s3", 40, "alpha"),
            ("s4", 77, "beta"),
        ]);
        let gw = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
        let (pairs, agg, report) =
            score_clusters(&clustering, &dataset, &gw, &ScoringOptions::default()).unwrap();
        assert_eq!(pairs.len(), 3, "complete graph on the alpha cluster");
        assert_eq!(report.pairs_scored, 3);
        assert!(report.unscorable.is_empty());
        assert_eq!(agg["s1"].mean - agg["s2"].mean, 20.0);
        assert_eq!(agg["s2"].mean - agg["s3"].mean, 20.0);
        assert_eq!(agg["s1"].n_comparisons, 2);
        // The singleton cluster member is present but unscored.
        assert_eq!(agg["s4"].mean, SENTINEL_UNSCORED);
        assert_eq!(agg["s4"].n_comparisons, 0);
    }

    #[test]
    fn cluster_scoring_is_deterministic() {
        let fixture = [
            ("s1", 30, "alpha"),
            ("s2", 55, "alpha"),
            ("s3", 70, "alpha"),
            ("s4", 20, "beta"),
            ("s5", 90, "beta"),
        ];
        let run = || {
            let (dataset, clustering, _) = planted_world(&fixture);
            let gw = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
            score_clusters(&clustering, &dataset, &gw, &ScoringOptions::default()).unwrap()
        };
        let (p1, a1, _) = run();
        let (p2, a2, _) = run();
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn unscorable_pairs_are_reported_not_fatal() {
        let backend = FnBackend::new(|req: &ChatRequest| {
            let qualities = extract_markers(&req.user, "quality");
            if qualities.contains(&"13".to_string()) {
                Ok("garbage forever".into())
            } else {
                let q: Vec<i64> = qualities.iter().map(|q| q.parse().unwrap()).collect();
                Ok(format!(
                    r#"{{"score_1": {}, "score_2": {}, "feedback": ""}}"#,
                    q[0], q[1]
                ))
            }
        });
        let (dataset, clustering, _) = planted_world(&[
            ("s1", 13, "alpha"),
            ("s2", 60, "alpha"),
            ("s3", 40, "alpha"),
        ]);
        let gw = Gateway::ephemeral(Box::new(backend));
        let (pairs, agg, report) =
            score_clusters(&clustering, &dataset, &gw, &ScoringOptions::default()).unwrap();
        assert_eq!(pairs.len(), 1, "only the pair without s1 survives");
        assert_eq!(report.unscorable.len(), 2);
        assert_eq!(agg["s1"].mean, SENTINEL_UNSCORED);
        assert_eq!(agg["s2"].mean, 60.0);
        assert_eq!(agg["s3"].mean, 40.0);
    }

    #[test]
    fn gateway_failures_propagate() {
        let backend = FnBackend::new(|_: &ChatRequest| {
            Err(crate::gateway::BackendError::Http {
                status: 400,
                message: "bad request".into(),
            })
        });
        let (dataset, clustering, _) =
            planted_world(&[("s1", 10, "alpha"), ("s2", 20, "alpha")]);
        let gw = Gateway::ephemeral(Box::new(backend));
        let err = score_clusters(&clustering, &dataset, &gw, &ScoringOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn warm_cache_rerun_makes_no_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = [("s1", 30, "alpha"), ("s2", 55, "alpha"), ("s3", 70, "alpha")];
        let (dataset, clustering, _) = planted_world(&fixture);
        let opts = ScoringOptions::default();

        let gw = Gateway::new(
            Box::new(planted_mock(0, 10)),
            Some(dir.path().to_path_buf()),
            Default::default(),
        )
        .unwrap();
        let (pairs_cold, agg_cold, _) = score_clusters(&clustering, &dataset, &gw, &opts).unwrap();
        assert!(gw.backend_calls() > 0);

        let gw = Gateway::new(
            Box::new(crate::gateway::mock::PanickingBackend),
            Some(dir.path().to_path_buf()),
            Default::default(),
        )
        .unwrap();
        let (pairs_warm, agg_warm, _) = score_clusters(&clustering, &dataset, &gw, &opts).unwrap();
        assert_eq!(gw.backend_calls(), 0);
        assert_eq!(pairs_cold, pairs_warm);
        assert_eq!(agg_cold, agg_warm);
    }

    #[test]
    fn backend_trait_object_is_directly_usable() {
        // planted_mock's contract: slot 1 gets quality + bias, slot 2
        // gets quality untouched.
        let mock = planted_mock(0, 7);
        let req = build_score_prompt(&sample("x", 50), &sample("y", 20), "m");
        let text = mock.complete(&req).unwrap();
        assert_eq!(parse_score_response(&text).unwrap(), (57, 20));
    }
}
