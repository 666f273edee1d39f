//! Tag every sample in a dataset with open-domain tags.
//!
//! The offline mock backend stands in for an LLM here; swap in
//! `HttpBackend` (and TACOS_API_KEY) against a real endpoint. Either
//! way responses land in a disk cache, so reruns are free.
//!
//!     cargo run --example tag_with_mock

use tacos::gateway::{planted_mock, Gateway};
use tacos::synth::planted_dataset;
use tacos::tagging::{tag_dataset, TaggingOptions};

fn main() {
    // Synthetic corpus whose instructions carry [topic=..] markers the
    // mock tagger reads; a live model would infer tags from content.
    let dataset = planted_dataset(12, 3, 7);

    let cache_dir = tempfile::tempdir().expect("temp dir");
    let gateway = Gateway::new(
        Box::new(planted_mock(7, 0)),
        Some(cache_dir.path().to_path_buf()),
        Default::default(),
    )
    .expect("open gateway");

    let opts = TaggingOptions::default();
    let (annotations, report) = tag_dataset(&dataset, &gateway, &opts).expect("tagging");

    for annotation in annotations.iter().take(6) {
        let tags: Vec<&str> = annotation.raw_tags.iter().map(|t| t.text.as_str()).collect();
        println!("{} -> {:?}", annotation.sample_id, tags);
    }
    println!(
        "tagged {} samples with {} backend calls ({} parse failures)",
        annotations.len(),
        gateway.backend_calls(),
        report.parse_failures.len()
    );

    // Same requests again: every answer comes from the cache.
    let (_, _) = tag_dataset(&dataset, &gateway, &opts).expect("replay");
    println!(
        "after a rerun the backend still saw only {} calls",
        gateway.backend_calls()
    );
}
