//! Score two samples against each other, both presentation orders.
//!
//! A judge that favors whatever sits in slot one would corrupt a
//! single-order protocol. Scoring each pair twice with slots swapped
//! and averaging makes that inflation cancel exactly.
//!
//!     cargo run --example comparative_scoring

use tacos::corpus::IftSample;
use tacos::gateway::{planted_mock, Gateway};
use tacos::score::{aggregate_scores, score_pair_swapped, ScoringOptions};

fn sample(id: &str, quality: i64) -> IftSample {
    IftSample {
        id: id.into(),
        instruction: format!("Explain step by step how to verify claim {id}."),
        input: String::new(),
        output: format!("[quality={quality}] A worked answer for claim {id}."),
        source: "demo".into(),
    }
}

fn main() {
    // The mock judge reads the planted quality and adds 10 to whichever
    // sample sits in slot one, an exaggerated position preference.
    let gateway = Gateway::ephemeral(Box::new(planted_mock(0, 10)));
    let opts = ScoringOptions::default();

    let strong = sample("strong", 80);
    let weak = sample("weak", 60);

    let pair = score_pair_swapped(&strong, &weak, &gateway, &opts).expect("score");
    println!(
        "forward order:  {}={}, {}={}",
        pair.a, pair.forward.0, pair.b, pair.forward.1
    );
    println!(
        "reversed order: {}={}, {}={}",
        pair.a, pair.reverse.0, pair.b, pair.reverse.1
    );
    println!(
        "averaged means: {}={}, {}={}",
        pair.a,
        pair.mean_a(),
        pair.b,
        pair.mean_b()
    );
    println!(
        "mean difference {} - planted difference {} = bias left over",
        pair.mean_a() - pair.mean_b(),
        80 - 60
    );
    println!("orders agree on the winner: {}", pair.consistent);

    // Aggregation folds every comparison a sample took part in.
    let third = sample("middling", 70);
    let more = vec![
        pair,
        score_pair_swapped(&strong, &third, &gateway, &opts).expect("score"),
        score_pair_swapped(&weak, &third, &gateway, &opts).expect("score"),
    ];
    println!("\nper-sample aggregates over {} pairs:", more.len());
    for (id, agg) in aggregate_scores(&more) {
        println!(
            "  {id}: mean {:.1} over {} comparisons",
            agg.mean, agg.n_comparisons
        );
    }
}
