//! Thin operator surface over the library: one stage per invocation, or
//! `run` for the whole tag-to-select pipeline. Errors leave as one JSON
//! line on stderr with a nonzero exit, so wrappers never parse prose.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use tacos::pipeline::{files, load_config, Pipeline, PipelineError, Stage, StageOutcome};

#[derive(Parser)]
#[command(
    name = "tacos",
    version,
    about = "Select a small, diverse, high-quality subset of an instruction tuning dataset.",
    after_help = "STAGES:\n  tag        assign open-domain tags to every sample\n  normalize  collapse raw tags into a canonical vocabulary\n  embed      embed the vocabulary\n  cluster    k-means the tag embeddings, assign samples to clusters\n  score      pairwise comparative scoring inside each cluster\n  select     spend the budget across clusters, export the subset\n  eval       judge two response files head to head\n  run        tag through select, in order"
)]
struct Cli {
    /// Stage to execute, or `run` for the full pipeline.
    #[arg(value_name = "STAGE")]
    command: String,

    /// Run configuration (JSON).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Config override as a dotted path, e.g. --set select.budget=50.
    /// Values parse as JSON scalars when they can. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory, overriding out_dir from the config file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn print_outcome(outcome: &StageOutcome) {
    for note in &outcome.notes {
        println!("[{}] {}", outcome.stage, note);
    }
    println!("[{}] done in {} ms", outcome.stage, outcome.duration_ms);
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli.config, &cli.set, cli.out.as_deref())?;
    let out_dir = cfg.out_dir.clone();
    let pipeline = Pipeline::new(cfg)?;
    if cli.command == "run" {
        let (summary, outcomes) = pipeline.run_all()?;
        for outcome in &outcomes {
            print_outcome(outcome);
        }
        println!();
        print!("{summary}");
        println!("outputs: {}", out_dir.join(files::SELECTED).display());
    } else {
        let stage: Stage = cli.command.parse()?;
        let outcome = pipeline.run_stage(stage)?;
        print_outcome(&outcome);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            match e {
                PipelineError::UnknownStage { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
