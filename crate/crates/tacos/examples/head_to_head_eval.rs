//! Judge two models' responses head to head, position-swapped.
//!
//! A win is only a win when the judge picks the same response in both
//! presentation orders; disagreement collapses to a tie. The report's
//! win rate reads as (#Win - #Lose)/Total + 1, so 1.0 is parity.
//!
//!     cargo run --example head_to_head_eval

use std::collections::BTreeMap;

use tacos::eval::{evaluate, JudgeOptions};
use tacos::gateway::{length_judge, Gateway};

fn main() {
    let instructions = BTreeMap::from([
        ("q1".to_string(), "Explain why the sky is blue.".to_string()),
        ("q2".to_string(), "Name a prime number.".to_string()),
        ("q3".to_string(), "Translate 'cat' to German.".to_string()),
    ]);
    let model_a = BTreeMap::from([
        (
            "q1".to_string(),
            "Rayleigh scattering sends short blue wavelengths toward your eye from every part of the sky.".to_string(),
        ),
        ("q2".to_string(), "seven".to_string()),
        ("q3".to_string(), "Die Katze, or just Katze.".to_string()),
    ]);
    let model_b = BTreeMap::from([
        ("q1".to_string(), "Because of scattering.".to_string()),
        ("q2".to_string(), "A commonly cited prime number is seven.".to_string()),
        ("q3".to_string(), "Katze.".to_string()),
    ]);
    // Optional references unlock ROUGE and BLEU alongside the verdicts.
    let references = BTreeMap::from([
        ("q1".to_string(), "Rayleigh scattering favors short blue wavelengths.".to_string()),
        ("q2".to_string(), "Seven is prime.".to_string()),
        ("q3".to_string(), "Katze.".to_string()),
    ]);

    // The demo judge prefers the longer response; a live deployment
    // points the gateway at a judge model instead.
    let gateway = Gateway::ephemeral(Box::new(length_judge()));
    let (report, verdicts) = evaluate(
        &instructions,
        &model_a,
        &model_b,
        Some(&references),
        &gateway,
        &JudgeOptions::default(),
    )
    .expect("evaluate");

    for v in &verdicts {
        println!("{}: {:?}", v.instruction_id, v.outcome);
    }
    println!(
        "wins {} / ties {} / losses {} -> win rate {:.3}",
        report.wins, report.ties, report.losses, report.win_rate
    );
    println!(
        "ROUGE-1 {:.3}, ROUGE-2 {:.3}, ROUGE-L {:.3}, BLEU {:.3}",
        report.rouge1.unwrap(),
        report.rouge2.unwrap(),
        report.rouge_l.unwrap(),
        report.bleu.unwrap()
    );
}
