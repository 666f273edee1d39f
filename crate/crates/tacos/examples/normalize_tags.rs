//! Collapse a noisy open tag vocabulary into canonical tags.
//!
//! Four mechanisms stack: lexical cleanup (case, punctuation,
//! separators), a frequency filter for long-tail noise, association
//! merges for tags that co-occur with a more frequent parent, and
//! hand-written `alias => canonical` rules.
//!
//!     cargo run --example normalize_tags

use tacos::normalize::{normalize_all, NormalizeConfig};
use tacos::synth::variant_tag_corpus;

fn main() {
    // 2,000 distinct raw tags: 300 canonical bases plus case variants,
    // punctuation variants, rule aliases, co-occurring aliases, and
    // one-off noise.
    let (annotations, rules) = variant_tag_corpus();

    let dir = tempfile::tempdir().expect("temp dir");
    let rules_path = dir.path().join("rules.txt");
    std::fs::write(&rules_path, &rules).expect("write rules");
    println!("rules file begins with:");
    for line in rules.lines().take(3) {
        println!("  {line}");
    }

    let cfg = NormalizeConfig {
        rules_path: Some(rules_path),
        ..NormalizeConfig::default()
    };
    let outcome = normalize_all(&annotations, &cfg).expect("normalize");

    let raw = outcome.vocabulary.total_raw;
    let kept = outcome.vocabulary.counts.len();
    println!(
        "distinct tags: {raw} raw -> {kept} canonical ({:.1}% reduction)",
        100.0 * (1.0 - kept as f64 / raw as f64)
    );

    let retained = outcome
        .annotations
        .iter()
        .filter(|a| !a.normalized_tags.is_empty())
        .count();
    println!(
        "samples retaining at least one tag: {retained}/{}",
        outcome.annotations.len()
    );

    println!("example merges:");
    for (from, to) in outcome.merge_map.redirects.iter().take(5) {
        println!("  {from:?} -> {to:?}");
    }
    for warning in &outcome.warnings {
        println!("warning: {warning}");
    }
}
