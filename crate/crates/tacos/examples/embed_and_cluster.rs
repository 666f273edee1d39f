//! Embed a tag vocabulary and group it with k-means, then pull each
//! sample into its tags' majority cluster.
//!
//!     cargo run --example embed_and_cluster

use std::collections::BTreeMap;

use tacos::cluster::{assign_samples, kmeans, profile_clusters};
use tacos::embed::{HashEmbedder, TagEmbedder, TagVector};
use tacos::gateway::{planted_mock, Gateway};
use tacos::normalize::{normalize_all, NormalizeConfig};
use tacos::synth::planted_dataset;
use tacos::tagging::{tag_dataset, TaggingOptions};

fn main() {
    // Tag and normalize a small corpus first; clustering operates on
    // the canonical vocabulary that falls out.
    let dataset = planted_dataset(30, 3, 2);
    let gateway = Gateway::ephemeral(Box::new(planted_mock(2, 0)));
    let (annotations, _) =
        tag_dataset(&dataset, &gateway, &TaggingOptions::default()).expect("tagging");
    let outcome = normalize_all(
        &annotations,
        &NormalizeConfig {
            min_freq: 2,
            ..NormalizeConfig::default()
        },
    )
    .expect("normalize");

    let tags: Vec<String> = outcome.vocabulary.counts.keys().cloned().collect();
    println!("canonical vocabulary: {tags:?}");

    // Feature hashing needs no network and no training; each tag maps
    // to a deterministic unit vector.
    let embedder = HashEmbedder { dim: 32 };
    let vectors: BTreeMap<String, TagVector> = embedder
        .embed(&tags)
        .expect("embed")
        .into_iter()
        .map(|v| (v.tag.clone(), v))
        .collect();

    let mut clustering = kmeans(&vectors, 3, 7).expect("cluster");
    assign_samples(&mut clustering, &outcome.annotations, &vectors).expect("assign");
    println!("k={} inertia={:.4}", clustering.k, clustering.inertia);

    let profiles = profile_clusters(&clustering, &dataset, &vectors);
    for p in &profiles {
        println!(
            "cluster {}: representative {:?}, {} tags, {} samples",
            p.cluster,
            p.representative_tag,
            p.member_tags.len(),
            p.member_samples.len()
        );
    }
}
