//! Tag normalization: collapse a noisy open tag vocabulary into a
//! compact canonical one.
//!
//! Four mechanisms, applied in order: lexical cleanup (case, Unicode
//! form, separators, punctuation), frequency filtering of long-tail
//! tags, association aggregation (merge a tag into a higher-frequency
//! tag it reliably co-occurs with), and hand-written merge rules.
//! Association merges run to a fixpoint: merging can raise the winner's
//! frequency enough to qualify further merges, and normalizing an
//! already-normalized corpus must be the identity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tagging::TagAnnotation;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeConfig {
    /// Tags carried by fewer samples than this are dropped.
    pub min_freq: usize,
    /// Minimum co-occurring samples for an association merge.
    pub assoc_min_support: usize,
    /// Minimum co-occurrence share of the merged tag's frequency.
    pub assoc_min_confidence: f64,
    pub rules_path: Option<PathBuf>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            min_freq: 5,
            assoc_min_support: 3,
            assoc_min_confidence: 0.8,
            rules_path: None,
        }
    }
}

/// Canonical tag counts. A tag's frequency is the number of samples
/// carrying it, not total occurrences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagVocabulary {
    pub counts: BTreeMap<String, usize>,
    /// Distinct raw tag texts before any normalization.
    pub total_raw: usize,
}

/// Redirects from merged tags to their canonical survivors,
/// path-compressed: a redirect target is never itself redirected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    pub redirects: BTreeMap<String, String>,
}

impl MergeMap {
    pub fn resolve<'a>(&'a self, tag: &'a str) -> &'a str {
        self.redirects.get(tag).map(|s| s.as_str()).unwrap_or(tag)
    }

    pub fn is_empty(&self) -> bool {
        self.redirects.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("tag {raw:?} is empty after lexical normalization")]
    EmptyAfterNormalization { raw: String },
    #[error("rules line {line}: {message}")]
    RuleParse { line: usize, message: String },
    #[error("rules form a cycle: {path}")]
    RuleCycle { path: String },
    #[error("rules file {path}: {message}")]
    RulesIo { path: String, message: String },
}

/// Lexical canonical form: NFKC, lowercase, separators to spaces,
/// punctuation removed, whitespace collapsed.
pub fn lexical_normalize(raw: &str) -> Result<String, NormalizeError> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.nfkc().flat_map(char::to_lowercase) {
        let separator = ch.is_whitespace()
            || matches!(ch, '-' | '_' | '\u{2010}'..='\u{2015}' | '\u{2212}');
        if separator {
            pending_space = true;
        } else if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        }
        // Remaining punctuation drops without becoming a separator.
    }
    if out.is_empty() {
        return Err(NormalizeError::EmptyAfterNormalization {
            raw: raw.to_string(),
        });
    }
    Ok(out)
}

/// Keep only tags with frequency at least `min_freq`.
pub fn frequency_filter(vocab: &TagVocabulary, min_freq: usize) -> TagVocabulary {
    TagVocabulary {
        counts: vocab
            .counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(t, &c)| (t.clone(), c))
            .collect(),
        total_raw: vocab.total_raw,
    }
}

fn count_tag_sets(sets: &[BTreeSet<String>]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for set in sets {
        for tag in set {
            *counts.entry(tag.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// True when `a` may absorb `b`: strictly more frequent, or equally
/// frequent and lexicographically smaller.
fn absorbs(a: &str, freq_a: usize, b: &str, freq_b: usize) -> bool {
    freq_a > freq_b || (freq_a == freq_b && a < b)
}

fn compress(redirects: &mut BTreeMap<String, String>) {
    let keys: Vec<String> = redirects.keys().cloned().collect();
    for key in keys {
        let mut target = redirects[&key].clone();
        let mut hops = 0;
        while let Some(next) = redirects.get(&target) {
            target = next.clone();
            hops += 1;
            assert!(hops <= redirects.len(), "redirect cycle at {key:?}");
        }
        redirects.insert(key, target);
    }
}

/// One association mining pass over per-sample tag sets: for every tag
/// pair with enough support, merge the less frequent tag into the more
/// frequent one when the co-occurrence covers enough of its samples.
/// Result is path-compressed. Only tags meeting `min_freq` participate.
fn association_pass(sets: &[BTreeSet<String>], cfg: &NormalizeConfig) -> BTreeMap<String, String> {
    let freqs = count_tag_sets(sets);
    let eligible: BTreeSet<&String> = freqs
        .iter()
        .filter(|(_, &c)| c >= cfg.min_freq)
        .map(|(t, _)| t)
        .collect();

    let mut support: HashMap<(&String, &String), usize> = HashMap::new();
    for set in sets {
        let members: Vec<&String> = set.iter().filter(|t| eligible.contains(t)).collect();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                *support.entry((members[i], members[j])).or_insert(0) += 1;
            }
        }
    }

    // Best target per source: highest frequency, ties to the smaller
    // string. Independent of map iteration order.
    let mut best: BTreeMap<&String, &String> = BTreeMap::new();
    for (&(x, y), &s) in &support {
        if s < cfg.assoc_min_support {
            continue;
        }
        for (b, a) in [(x, y), (y, x)] {
            let (fa, fb) = (freqs[a], freqs[b]);
            if !absorbs(a, fa, b, fb) {
                continue;
            }
            if (s as f64) / (fb as f64) < cfg.assoc_min_confidence {
                continue;
            }
            let better = match best.get(b) {
                None => true,
                Some(&cur) => {
                    let fc = freqs[cur];
                    fa > fc || (fa == fc && a < cur)
                }
            };
            if better {
                best.insert(b, a);
            }
        }
    }

    let mut redirects: BTreeMap<String, String> = best
        .into_iter()
        .map(|(b, a)| (b.clone(), a.clone()))
        .collect();
    compress(&mut redirects);
    redirects
}

/// Association aggregation over annotations whose `normalized_tags`
/// carry lexically normalized tags.
pub fn association_aggregate(annotations: &[TagAnnotation], cfg: &NormalizeConfig) -> MergeMap {
    let sets: Vec<BTreeSet<String>> = annotations
        .iter()
        .map(|a| a.normalized_tags.iter().cloned().collect())
        .collect();
    MergeMap {
        redirects: association_pass(&sets, cfg),
    }
}

/// Parse a rules file body: one `alias => canonical` per line, `#`
/// comments. Both sides are lexically normalized; the full rule graph
/// must be conflict-free and acyclic. Result is path-compressed.
pub fn parse_rules(text: &str) -> Result<BTreeMap<String, String>, NormalizeError> {
    let mut rules: BTreeMap<String, String> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, "=>");
        let lhs = parts.next().unwrap_or("").trim();
        let rhs = parts.next().map(str::trim);
        let Some(rhs) = rhs else {
            return Err(NormalizeError::RuleParse {
                line: line_no,
                message: format!("expected `alias => canonical`, got {line:?}"),
            });
        };
        let norm = |side: &str| {
            lexical_normalize(side).map_err(|_| NormalizeError::RuleParse {
                line: line_no,
                message: format!("side {side:?} is empty after normalization"),
            })
        };
        let (from, to) = (norm(lhs)?, norm(rhs)?);
        if from == to {
            continue;
        }
        match rules.get(&from) {
            Some(existing) if *existing != to => {
                return Err(NormalizeError::RuleParse {
                    line: line_no,
                    message: format!("conflicting rules for {from:?}: {existing:?} and {to:?}"),
                });
            }
            _ => {
                rules.insert(from, to);
            }
        }
    }

    // Cycle check over the full graph before compression.
    for start in rules.keys() {
        let mut path = vec![start.clone()];
        let mut cur = start.clone();
        while let Some(next) = rules.get(&cur) {
            if path.contains(next) {
                path.push(next.clone());
                return Err(NormalizeError::RuleCycle {
                    path: path.join(" -> "),
                });
            }
            path.push(next.clone());
            cur = next.clone();
        }
    }
    compress(&mut rules);
    Ok(rules)
}

/// Rules restricted to aliases present in the vocabulary; absent aliases
/// are accepted but inert.
pub fn apply_rules(vocab: &TagVocabulary, rules_path: &std::path::Path) -> Result<MergeMap, NormalizeError> {
    let text = std::fs::read_to_string(rules_path).map_err(|e| NormalizeError::RulesIo {
        path: rules_path.display().to_string(),
        message: e.to_string(),
    })?;
    let rules = parse_rules(&text)?;
    Ok(MergeMap {
        redirects: rules
            .into_iter()
            .filter(|(from, _)| vocab.counts.contains_key(from))
            .collect(),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum EdgeKind {
    Assoc,
    Rule,
}

/// Combine association and rule edges (rules override per source),
/// repair cycles by dropping the association edges involved, compress.
/// A cycle of rules alone is impossible here: parse_rules rejects it.
fn combine_edges(
    assoc: BTreeMap<String, String>,
    rules: &BTreeMap<String, String>,
    active: impl Fn(&str) -> bool,
) -> Result<BTreeMap<String, String>, NormalizeError> {
    let mut edges: BTreeMap<String, (String, EdgeKind)> = assoc
        .into_iter()
        .map(|(s, t)| (s, (t, EdgeKind::Assoc)))
        .collect();
    for (from, to) in rules {
        if active(from) {
            edges.insert(from.clone(), (to.clone(), EdgeKind::Rule));
        }
    }

    'repair: loop {
        for start in edges.keys().cloned().collect::<Vec<_>>() {
            let mut path = vec![start.clone()];
            loop {
                let Some((next, _)) = edges.get(path.last().unwrap()) else {
                    break;
                };
                let next = next.clone();
                if let Some(pos) = path.iter().position(|p| *p == next) {
                    let cycle: Vec<String> = path[pos..].to_vec();
                    let culprit = cycle
                        .iter()
                        .find(|n| matches!(edges.get(*n), Some((_, EdgeKind::Assoc))))
                        .cloned();
                    match culprit {
                        Some(node) => {
                            edges.remove(&node);
                            continue 'repair;
                        }
                        None => {
                            return Err(NormalizeError::RuleCycle {
                                path: cycle.join(" -> "),
                            })
                        }
                    }
                }
                path.push(next);
            }
        }
        break;
    }

    let mut flat: BTreeMap<String, String> = edges.into_iter().map(|(s, (t, _))| (s, t)).collect();
    compress(&mut flat);
    Ok(flat)
}

#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    /// Input annotations with `normalized_tags` filled (deduplicated,
    /// first-appearance order). Raw tags are untouched.
    pub annotations: Vec<TagAnnotation>,
    pub vocabulary: TagVocabulary,
    /// All merges performed (lexical form to final canonical), both
    /// association- and rule-driven. Lexical collapse is not recorded
    /// here.
    pub merge_map: MergeMap,
    pub warnings: Vec<String>,
}

/// Full normalization: lexical cleanup, frequency filter, association
/// merges to a fixpoint, manual rules, and the final annotation rewrite.
pub fn normalize_all(
    annotations: &[TagAnnotation],
    cfg: &NormalizeConfig,
) -> Result<NormalizeOutcome, NormalizeError> {
    let rules = match &cfg.rules_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| NormalizeError::RulesIo {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            parse_rules(&text)?
        }
        None => BTreeMap::new(),
    };

    let mut warnings = Vec::new();

    // Lexical pass. Tags that normalize to nothing are noise; drop them
    // rather than failing the whole corpus.
    let mut raw_distinct: BTreeSet<&str> = BTreeSet::new();
    let mut dropped_empty = 0usize;
    let mut lexical_lists: Vec<Vec<String>> = Vec::with_capacity(annotations.len());
    for annotation in annotations {
        let mut list = Vec::new();
        let mut seen = BTreeSet::new();
        for raw in &annotation.raw_tags {
            raw_distinct.insert(raw.text.as_str());
            match lexical_normalize(&raw.text) {
                Ok(lex) => {
                    if seen.insert(lex.clone()) {
                        list.push(lex);
                    }
                }
                Err(_) => dropped_empty += 1,
            }
        }
        lexical_lists.push(list);
    }
    if dropped_empty > 0 {
        warnings.push(format!(
            "{dropped_empty} raw tag(s) were empty after lexical normalization and were dropped"
        ));
    }
    let total_raw = raw_distinct.len();

    // Frequency filter fixes the working tag set once; merged tags only
    // gain frequency afterwards.
    let all_counts = count_tag_sets(
        &lexical_lists
            .iter()
            .map(|l| l.iter().cloned().collect::<BTreeSet<String>>())
            .collect::<Vec<_>>(),
    );
    let kept: BTreeSet<String> = all_counts
        .iter()
        .filter(|(_, &c)| c >= cfg.min_freq)
        .map(|(t, _)| t.clone())
        .collect();
    if kept.is_empty() && !all_counts.is_empty() {
        warnings.push(format!(
            "frequency filter (min_freq {}) removed every tag",
            cfg.min_freq
        ));
    }

    let mut current: Vec<BTreeSet<String>> = lexical_lists
        .iter()
        .map(|l| l.iter().filter(|t| kept.contains(*t)).cloned().collect())
        .collect();

    // Merge rounds until nothing qualifies. Each round consumes at least
    // one tag, so this terminates.
    let mut accumulated: BTreeMap<String, String> = BTreeMap::new();
    loop {
        let assoc = association_pass(&current, cfg);
        let counts = count_tag_sets(&current);
        let round = combine_edges(assoc, &rules, |t| counts.contains_key(t))?;
        if round.is_empty() {
            break;
        }
        for set in &mut current {
            let rewritten: BTreeSet<String> = set
                .iter()
                .map(|t| round.get(t).unwrap_or(t).clone())
                .collect();
            *set = rewritten;
        }
        for (src, dst) in round {
            accumulated.insert(src, dst);
        }
    }
    compress(&mut accumulated);

    let final_counts = count_tag_sets(&current);
    let mut out_annotations = annotations.to_vec();
    for (annotation, lexical) in out_annotations.iter_mut().zip(&lexical_lists) {
        let mut seen = BTreeSet::new();
        let mut tags = Vec::new();
        for lex in lexical {
            if !kept.contains(lex) {
                continue;
            }
            let canonical = accumulated.get(lex).unwrap_or(lex);
            if seen.insert(canonical.clone()) {
                tags.push(canonical.clone());
            }
        }
        annotation.normalized_tags = tags;
    }

    Ok(NormalizeOutcome {
        annotations: out_annotations,
        vocabulary: TagVocabulary {
            counts: final_counts,
            total_raw,
        },
        merge_map: MergeMap {
            redirects: accumulated,
        },
        warnings,
    })
}
