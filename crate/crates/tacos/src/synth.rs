//! Deterministic synthetic fixtures with planted ground truth.
//!
//! The planted dataset carries `[topic=..]` markers in instructions and
//! `[quality=..]` markers in outputs, which the mock backend reads, so
//! offline runs have known-correct answers to validate against. The
//! variant tag corpus mirrors a noisy open vocabulary: canonical tags
//! buried under case and punctuation variants, synonym aliases covered
//! by rules, co-occurring aliases, and one-off noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, IftSample};
use crate::gateway::mock::extract_markers;
use crate::tagging::{RawTag, TagAnnotation};

pub const TOPIC_NAMES: [&str; 10] = [
    "algebra",
    "botany",
    "chemistry",
    "dialogue",
    "economics",
    "folklore",
    "geometry",
    "history",
    "inference",
    "journalism",
];

/// Synthetic dataset: topics round-robin over the fixed name list,
/// qualities uniform in 1..=89 so a +10 judge bias never clips at 100.
pub fn planted_dataset(n_samples: usize, n_topics: usize, seed: u64) -> Dataset {
    assert!(
        (1..=TOPIC_NAMES.len()).contains(&n_topics),
        "n_topics must be in 1..={}",
        TOPIC_NAMES.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|i| {
            let topic = TOPIC_NAMES[i % n_topics];
            let quality: i64 = rng.random_range(1..=89);
            let filler = " Please show the intermediate steps.".repeat(i % 4);
            IftSample {
                id: format!("p{i:04}"),
                instruction: format!("[topic={topic}] Work through {topic} item {i:04}.{filler}"),
                input: if i % 5 == 0 {
                    format!("reference row {i:04}")
                } else {
                    String::new()
                },
                output: format!("[quality={quality}] A worked {topic} answer for item {i:04}."),
                source: "planted".into(),
            }
        })
        .collect();
    Dataset {
        name: format!("planted-{n_samples}x{n_topics}"),
        samples,
    }
}

/// Ground-truth quality a sample was planted with.
pub fn planted_quality(sample: &IftSample) -> Option<i64> {
    extract_markers(&sample.output, "quality")
        .first()
        .and_then(|q| q.parse().ok())
}

/// Ground-truth topic a sample was planted with.
pub fn planted_topic(sample: &IftSample) -> Option<String> {
    extract_markers(&sample.instruction, "topic").first().cloned()
}

fn raw(texts: &[String]) -> Vec<RawTag> {
    texts
        .iter()
        .map(|t| RawTag {
            text: t.clone(),
            explanation: None,
        })
        .collect()
}

/// Tag corpus of exactly 2,000 distinct raw strings: 1,400 are variants
/// of 300 canonical tags (case, punctuation, a rules-file synonym, and
/// for two thirds of the bases a co-occurring alias) and 600 are
/// single-use noise. Every sample keeps at least one tag that resolves
/// to its canonical, so full normalization retains everything. Returns
/// the annotations and the rules file body.
pub fn variant_tag_corpus() -> (Vec<TagAnnotation>, String) {
    let mut annotations: Vec<TagAnnotation> = Vec::new();
    let mut rules = String::from("# synonym aliases for the variant corpus\n");
    let mut noise_serial = 0usize;
    let mut sample_serial = 0usize;

    let push = |tags: Vec<String>, annotations: &mut Vec<TagAnnotation>, serial: &mut usize| {
        annotations.push(TagAnnotation {
            sample_id: format!("v{:05}", *serial),
            raw_tags: raw(&tags),
            normalized_tags: Vec::new(),
        });
        *serial += 1;
    };

    for i in 0..300usize {
        let canon = format!("field {i:03}");
        rules.push_str(&format!("fld {i:03} => field {i:03}\n"));

        // Co-occurring alias for the first 200 bases: five joint
        // appearances give it support 5 and confidence 1.0.
        if i < 200 {
            for _ in 0..5 {
                push(
                    vec![canon.clone(), format!("field {i:03} co")],
                    &mut annotations,
                    &mut sample_serial,
                );
            }
        }
        // Synonym alias occurs alone; the rules file redeems it.
        for _ in 0..5 {
            push(vec![format!("fld {i:03}")], &mut annotations, &mut sample_serial);
        }
        // Case and punctuation variants, two with one-off noise riders.
        push(
            vec![format!("Field {i:03}"), format!("stray {noise_serial:04}")],
            &mut annotations,
            &mut sample_serial,
        );
        noise_serial += 1;
        push(vec![format!("FIELD-{i:03}")], &mut annotations, &mut sample_serial);
        push(
            vec![canon.clone(), format!("stray {noise_serial:04}")],
            &mut annotations,
            &mut sample_serial,
        );
        noise_serial += 1;
        push(vec![canon.clone()], &mut annotations, &mut sample_serial);
        if i >= 200 {
            // Without the co-occurrence samples these bases would sit
            // at lexical frequency 4, one short of the cutoff.
            push(vec![canon.clone()], &mut annotations, &mut sample_serial);
        }
    }

    (annotations, rules)
}
