//! Acceptance suite: eight checks covering the headline behaviors, one
//! test per check. Each prints a PASS or FAIL line with its runtime
//! (visible under `cargo test --test acceptance -- --nocapture`), and
//! each enforces a wall-clock budget.
//!
//! Oracles are computed here, independently of the library internals:
//! exhaustive SSE enumeration for k-means, planted markers for scoring
//! and selection, closed-form arithmetic for win rates and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tacos::corpus::{load_dataset, save_dataset, DatasetFormat, IftSample};
use tacos::embed::TagVector;
use tacos::eval::{bleu, rouge_l, rouge_n, win_rate};
use tacos::gateway::{planted_mock, Gateway, PanickingBackend};
use tacos::normalize::{normalize_all, NormalizeConfig};
use tacos::pipeline::{config, files, Pipeline, PipelineConfig};
use tacos::score::{aggregate_scores, score_pair_swapped, ScoringOptions};
use tacos::synth::{planted_dataset, planted_quality, planted_topic, variant_tag_corpus};

fn check(n: u32, name: &str, budget: Duration, body: impl FnOnce() + std::panic::UnwindSafe) {
    let started = Instant::now();
    let outcome = catch_unwind(body);
    let elapsed = started.elapsed();
    let ok = outcome.is_ok() && elapsed <= budget;
    println!(
        "acceptance {n} ({name}): {} ({} ms, budget {} ms)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_millis(),
        budget.as_millis()
    );
    match outcome {
        Err(panic) => resume_unwind(panic),
        Ok(()) => assert!(
            elapsed <= budget,
            "acceptance {n} exceeded its {budget:?} budget: {elapsed:?}"
        ),
    }
}

#[test]
fn acceptance_1_win_rate_table() {
    check(1, "win-rate table", Duration::from_secs(1), || {
        let rows = [
            (1310, 170, 580, 1.354),
            (1345, 169, 546, 1.388),
            (1175, 482, 403, 1.375),
            (1586, 275, 199, 1.673),
        ];
        for (wins, ties, losses, expected) in rows {
            let rate = win_rate(wins, ties, losses).unwrap();
            let at_3dp = (rate * 1000.0).round() / 1000.0;
            assert_eq!(
                at_3dp, expected,
                "({wins},{ties},{losses}) gave {rate}, expected {expected} at 3 decimals"
            );
        }
    });
}

#[test]
fn acceptance_2_tag_normalization_reduction() {
    check(2, "tag normalization reduction", Duration::from_secs(10), || {
        let (annotations, rules) = variant_tag_corpus();
        let dir = tempfile::tempdir().unwrap();
        let rules_path = dir.path().join("rules.txt");
        std::fs::write(&rules_path, rules).unwrap();

        let cfg = NormalizeConfig {
            rules_path: Some(rules_path),
            ..NormalizeConfig::default()
        };
        let outcome = normalize_all(&annotations, &cfg).unwrap();

        let raw = outcome.vocabulary.total_raw;
        let canonical = outcome.vocabulary.counts.len();
        assert_eq!(raw, 2000, "the generated corpus must hold 2000 distinct raw tags");
        let reduction = 1.0 - canonical as f64 / raw as f64;
        assert!(
            reduction >= 0.60,
            "distinct tags only fell {raw} -> {canonical} ({:.1}% reduction)",
            100.0 * reduction
        );

        let retained = outcome
            .annotations
            .iter()
            .filter(|a| !a.normalized_tags.is_empty())
            .count();
        let share = retained as f64 / outcome.annotations.len() as f64;
        assert!(
            share >= 0.95,
            "only {retained}/{} samples kept a tag ({share:.3})",
            outcome.annotations.len()
        );
    });
}

/// Lowest SSE over every assignment of points to at most k clusters,
/// by exhaustive enumeration. Each cluster's centroid is its mean.
fn exhaustive_min_sse(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let mut labels = vec![0usize; n];
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut sse = 0.0;
        for (p, &l) in points.iter().zip(&labels) {
            sse += p
                .iter()
                .zip(&sums[l])
                .map(|(v, s)| {
                    let d = v - s / counts[l] as f64;
                    d * d
                })
                .sum::<f64>();
        }
        best = best.min(sse);
    }
    best
}

#[test]
fn acceptance_3_kmeans_oracle_equivalence() {
    check(3, "k-means oracle equivalence", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(90210);
        for instance in 0..20 {
            let n = rng.random_range(3..=8usize);
            let dim = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize.min(n));
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect())
                .collect();
            let vectors: BTreeMap<String, TagVector> = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let tag = format!("point {i}");
                    let v = TagVector {
                        tag: tag.clone(),
                        values: p.clone(),
                    };
                    (tag, v)
                })
                .collect();

            let best_of_seeds = (0..5)
                .map(|seed| tacos::cluster::kmeans(&vectors, k, seed).unwrap().inertia)
                .fold(f64::INFINITY, f64::min);
            let oracle = exhaustive_min_sse(&points, k);
            assert!(
                (best_of_seeds - oracle).abs() < 1e-9,
                "instance {instance} (n={n}, dim={dim}, k={k}): kmeans SSE {best_of_seeds} vs exhaustive {oracle}"
            );
        }
    });
}

#[test]
fn acceptance_4_swap_bias_cancellation() {
    check(4, "swap-bias cancellation", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(440);
        let qualities: Vec<i64> = (0..30).map(|_| rng.random_range(1..=89)).collect();
        let samples: Vec<IftSample> = qualities
            .iter()
            .enumerate()
            .map(|(i, q)| IftSample {
                id: format!("b{i:02}"),
                instruction: format!("solve task {i:02}"),
                input: String::new(),
                output: format!("[quality={q}] answer {i:02}"),
                source: "bias-check".into(),
            })
            .collect();

        // The judge inflates slot one by exactly 10. Swapped rescoring
        // puts every sample in each slot once, so the inflation shifts
        // all means equally and cancels in differences.
        let gateway = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
        let opts = ScoringOptions::default();
        let mut pairs = Vec::new();
        let mut picked = Vec::new();
        while picked.len() < 100 {
            let a = rng.random_range(0..samples.len());
            let b = rng.random_range(0..samples.len());
            if a == b {
                continue;
            }
            pairs.push(score_pair_swapped(&samples[a], &samples[b], &gateway, &opts).unwrap());
            picked.push((a, b));
        }

        let agg = aggregate_scores(&pairs);
        for (a, b) in picked {
            let measured = agg[&samples[a].id].mean - agg[&samples[b].id].mean;
            let truth = (qualities[a] - qualities[b]) as f64;
            assert!(
                (measured - truth).abs() < 1e-9,
                "pair ({a},{b}): measured difference {measured}, planted {truth}"
            );
        }
    });
}

fn planted_pipeline_config(dir: &std::path::Path, budget: usize) -> PipelineConfig {
    let dataset = planted_dataset(500, 10, 77);
    let data_path = dir.join("planted.jsonl");
    save_dataset(&dataset, &data_path).unwrap();
    config::from_value(json!({
        "dataset": { "path": data_path },
        "backend": { "kind": "mock", "seed": 9, "position_bias": 10 },
        "out_dir": dir.join("out"),
        "cluster": { "k": 10, "seed": 41 },
        "select": { "budget": budget },
    }))
    .unwrap()
}

#[test]
fn acceptance_5_end_to_end_selection_quality() {
    check(5, "end-to-end selection quality", Duration::from_secs(60), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_pipeline_config(dir.path(), 50);
        let out = cfg.out_dir.clone();
        let pipeline = Pipeline::new(cfg).unwrap();
        let (summary, _) = pipeline.run_all().unwrap();
        assert_eq!(summary.selected, 50);

        let selected = load_dataset(&out.join(files::SELECTED), DatasetFormat::Jsonl).unwrap();
        assert_eq!(selected.samples.len(), 50, "budget must be spent exactly");

        let topics: BTreeSet<String> = selected
            .samples
            .iter()
            .map(|s| planted_topic(s).expect("every planted sample names its topic"))
            .collect();
        assert_eq!(topics.len(), 10, "all topics must be covered, got {topics:?}");

        let chosen_mean = selected
            .samples
            .iter()
            .map(|s| planted_quality(s).expect("every planted sample carries a quality") as f64)
            .sum::<f64>()
            / 50.0;

        // Percentile oracle: 1,000 uniform 50-subsets of the same corpus.
        let full = planted_dataset(500, 10, 77);
        let qualities: Vec<f64> = full
            .samples
            .iter()
            .map(|s| planted_quality(s).unwrap() as f64)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(555);
        let mut means: Vec<f64> = (0..1000)
            .map(|_| {
                rand::seq::index::sample(&mut rng, 500, 50)
                    .iter()
                    .map(|i| qualities[i])
                    .sum::<f64>()
                    / 50.0
            })
            .collect();
        means.sort_by(f64::total_cmp);
        let p95 = means[950];
        assert!(
            chosen_mean >= p95,
            "selected mean quality {chosen_mean:.2} below the 95th percentile {p95:.2} of random subsets"
        );
    });
}

#[test]
fn acceptance_6_metric_fixtures() {
    check(6, "metric fixtures", Duration::from_secs(1), || {
        let text = "the quick brown fox jumps";
        for n in 1..=2 {
            assert_eq!(rouge_n(text, text, n), 1.0, "ROUGE-{n} identity");
        }
        assert_eq!(rouge_l(text, text), 1.0, "ROUGE-L identity");
        assert_eq!(bleu(text, text), 1.0, "BLEU identity");

        for n in 1..=2 {
            assert_eq!(rouge_n("", text, n), 0.0);
            assert_eq!(rouge_n(text, "", n), 0.0);
        }
        assert_eq!(rouge_l("", text), 0.0);
        assert_eq!(bleu("", text), 0.0);

        // Hand-derived: P = 3/3, R = 3/5, F1 = 2PR/(P+R) = 0.75.
        let f1 = rouge_n("the cat sat", "the cat sat on mat", 1);
        assert!((f1 - 0.75).abs() < 1e-12, "ROUGE-1 fixture gave {f1}");
        // Hand-derived: LCS = 2, P = 2/2, R = 2/3, F1 = 0.8.
        let f1 = rouge_l("a c", "a b c");
        assert!((f1 - 0.8).abs() < 1e-12, "ROUGE-L fixture gave {f1}");
    });
}

#[test]
fn acceptance_7_rerun_determinism() {
    check(7, "rerun determinism", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_pipeline_config(dir.path(), 50);
        let out = cfg.out_dir.clone();

        let first_pipeline = Pipeline::new(cfg.clone()).unwrap();
        first_pipeline.run_all().unwrap();
        let first_selected = std::fs::read(out.join(files::SELECTED)).unwrap();
        let first_clusters = std::fs::read(out.join(files::CLUSTERS)).unwrap();
        drop(first_pipeline);

        let second_pipeline = Pipeline::new(cfg).unwrap();
        second_pipeline.run_all().unwrap();
        assert_eq!(
            std::fs::read(out.join(files::SELECTED)).unwrap(),
            first_selected,
            "selected.jsonl changed between identical runs"
        );
        assert_eq!(
            std::fs::read(out.join(files::CLUSTERS)).unwrap(),
            first_clusters,
            "clusters.json changed between identical runs"
        );
    });
}

#[test]
fn acceptance_8_replay_purity() {
    check(8, "replay purity", Duration::from_secs(120), || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = planted_pipeline_config(dir.path(), 50);

        let warmup = Pipeline::new(cfg.clone()).unwrap();
        warmup.run_all().unwrap();
        assert!(warmup.gateway().backend_calls() > 0);
        drop(warmup);

        // Same directory, same caches; a backend that panics on contact
        // proves the rerun is answered entirely from disk.
        let replay = Pipeline::with_backend(cfg, Box::new(PanickingBackend)).unwrap();
        let result = AssertUnwindSafe(|| replay.run_all().unwrap());
        catch_unwind(result).expect("replay must not reach the backend");
        assert_eq!(replay.gateway().backend_calls(), 0);
    });
}
