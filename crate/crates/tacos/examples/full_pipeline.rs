//! The whole pipeline through the library API: tag, normalize, embed,
//! cluster, score, select, against one output directory.
//!
//! The same flow is available from the shell:
//!
//!     tacos run --config cfg.json --set select.budget=20
//!
//!     cargo run --example full_pipeline

use serde_json::json;

use tacos::corpus::save_dataset;
use tacos::gateway::PanickingBackend;
use tacos::pipeline::{config, files, Pipeline};
use tacos::synth::{planted_dataset, planted_quality};

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");

    // 200 samples across 5 planted topics, each with a hidden quality
    // the mock scorer can read.
    let dataset = planted_dataset(200, 5, 31);
    let data_path = dir.path().join("planted.jsonl");
    save_dataset(&dataset, &data_path).expect("write dataset");

    let cfg = config::from_value(json!({
        "dataset": { "path": data_path },
        "backend": { "kind": "mock", "seed": 5, "position_bias": 10 },
        "out_dir": dir.path().join("out"),
        "cluster": { "k": 5, "seed": 23 },
        "select": { "budget": 20 },
    }))
    .expect("config");
    let out_dir = cfg.out_dir.clone();

    let pipeline = Pipeline::new(cfg.clone()).expect("pipeline");
    let (summary, outcomes) = pipeline.run_all().expect("run");
    for outcome in &outcomes {
        for note in &outcome.notes {
            println!("[{}] {note}", outcome.stage);
        }
    }
    println!();
    print!("{summary}");

    let selected = std::fs::read_to_string(out_dir.join(files::SELECTED)).expect("read subset");
    let mean_quality: f64 = selected
        .lines()
        .map(|line| {
            let sample: tacos::corpus::IftSample = serde_json::from_str(line).expect("parse");
            planted_quality(&sample).expect("planted marker") as f64
        })
        .sum::<f64>()
        / summary.selected as f64;
    let all_mean: f64 = dataset
        .samples
        .iter()
        .map(|s| planted_quality(s).unwrap() as f64)
        .sum::<f64>()
        / dataset.samples.len() as f64;
    println!("\nmean planted quality: selected {mean_quality:.1} vs corpus {all_mean:.1}");
    drop(pipeline);

    // Rerun against the same directory with a backend that panics on
    // contact: warm caches answer everything.
    let replay = Pipeline::with_backend(cfg, Box::new(PanickingBackend)).expect("pipeline");
    replay.run_all().expect("replay");
    println!(
        "replay finished with {} backend calls",
        replay.gateway().backend_calls()
    );
}
