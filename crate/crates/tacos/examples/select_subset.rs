//! Spend a selection budget across clusters and take the top scorers.
//!
//! Quotas are proportional to cluster size with a floor of one, so
//! small clusters survive; leftover budget spills to untagged samples
//! and then back to whatever scored well anywhere.
//!
//!     cargo run --example select_subset

use std::collections::BTreeMap;

use tacos::cluster::ClusterProfile;
use tacos::corpus::{Dataset, IftSample};
use tacos::score::AggScore;
use tacos::select::{allocate_budget, select_subset};

fn main() {
    // Quota arithmetic alone: largest-remainder keeps the total exact.
    let sizes = BTreeMap::from([(0usize, 50usize), (1, 30), (2, 20)]);
    let quotas = allocate_budget(&sizes, 10);
    println!("sizes {sizes:?} with budget 10 -> quotas {quotas:?}");

    // A toy corpus: cluster 0 holds four scored samples, cluster 1 two.
    let ids = ["r1", "r2", "r3", "r4", "s1", "s2"];
    let means = [75.0, 62.5, 81.0, 70.0, 55.0, 90.0];
    let samples: Vec<IftSample> = ids
        .iter()
        .map(|id| IftSample {
            id: (*id).into(),
            instruction: format!("Answer request {id} with a full derivation."),
            input: String::new(),
            output: format!("response for {id}"),
            source: "demo".into(),
        })
        .collect();
    let dataset = Dataset {
        name: "toy".into(),
        samples,
    };

    let agg: BTreeMap<String, AggScore> = ids
        .iter()
        .zip(means)
        .map(|(id, mean)| {
            let a = AggScore {
                sample_id: (*id).into(),
                mean,
                n_comparisons: 3,
                flagged_inconsistent: 0,
            };
            ((*id).to_string(), a)
        })
        .collect();

    let profiles = vec![
        ClusterProfile {
            cluster: 0,
            representative_tag: "reasoning".into(),
            member_tags: vec!["reasoning".into()],
            member_samples: ids[..4].iter().map(|s| s.to_string()).collect(),
            longest_instruction_sample: None,
        },
        ClusterProfile {
            cluster: 1,
            representative_tag: "summarization".into(),
            member_tags: vec!["summarization".into()],
            member_samples: ids[4..].iter().map(|s| s.to_string()).collect(),
            longest_instruction_sample: None,
        },
    ];

    let result = select_subset(&dataset, &profiles, &[], &agg, 4);
    println!("per-cluster quotas: {:?}", result.per_cluster_quota);
    println!("chosen, in cluster order then score order:");
    for id in &result.chosen {
        println!("  {id} (mean {})", agg[id].mean);
    }
    let fallbacks: Vec<_> = result
        .fallback_used
        .iter()
        .filter(|(_, f)| **f != tacos::select::Fallback::None)
        .collect();
    if fallbacks.is_empty() {
        println!("no cluster needed a fallback; every quota was met by scored samples");
    }
    for (cluster, fallback) in fallbacks {
        println!("cluster {cluster} used fallback {fallback:?}");
    }
}
