//! Load an instruction dataset from JSONL and print its shape.
//!
//!     cargo run --example load_and_stats

use tacos::corpus::{dataset_stats, load_dataset, DatasetFormat};

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("tiny.jsonl");
    std::fs::write(
        &path,
        concat!(
            r#"{"id":"a1","instruction":"Sum the integers from 1 to 100.","input":"","output":"5050","source":"demo"}"#,
            "\n",
            r#"{"id":"a2","instruction":"Name the largest planet.","input":"","output":"Jupiter is the largest planet.","source":"demo"}"#,
            "\n",
            r#"{"instruction":"Translate to French: good morning","input":"","output":"bonjour","source":"demo"}"#,
            "\n",
        ),
    )
    .expect("write dataset");

    let dataset = load_dataset(&path, DatasetFormat::Jsonl).expect("parse dataset");
    println!("loaded {:?} with {} samples", dataset.name, dataset.samples.len());

    // The third record has no id; one was derived from its content, so
    // reloading the same file always yields the same id.
    for sample in &dataset.samples {
        println!("  {} <- {:?}", sample.id, sample.instruction);
    }

    let stats = dataset_stats(&dataset);
    println!(
        "instruction chars: mean {:.1}, max {}",
        stats.mean_instruction_len, stats.max_instruction_len
    );
    println!(
        "output chars: mean {:.1}, max {}",
        stats.mean_output_len, stats.max_output_len
    );
}
