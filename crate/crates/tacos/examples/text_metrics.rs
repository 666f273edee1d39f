//! ROUGE-N, ROUGE-L, and BLEU on candidate/reference pairs.
//!
//! Tokenization is lowercase whitespace splitting; all scores live in
//! [0, 1] and identity scores exactly 1.
//!
//!     cargo run --example text_metrics

use tacos::eval::{bleu, rouge_l, rouge_n};

fn main() {
    let cases = [
        ("identity", "the cat sat on the mat", "the cat sat on the mat"),
        ("partial overlap", "the cat sat", "the cat sat on mat"),
        ("subsequence", "a c", "a b c"),
        ("word order", "b a", "a b"),
        ("repetition clipped", "the the the the", "the cat"),
        ("disjoint", "x y z", "p q r"),
    ];

    println!(
        "{:<20} {:>8} {:>8} {:>8} {:>8}",
        "case", "ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU"
    );
    for (name, candidate, reference) in cases {
        println!(
            "{name:<20} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            rouge_n(candidate, reference, 1),
            rouge_n(candidate, reference, 2),
            rouge_l(candidate, reference),
            bleu(candidate, reference)
        );
    }

    // ROUGE-L sees order through the longest common subsequence, so
    // scrambling words hurts it while leaving ROUGE-1 untouched.
    println!(
        "\nscramble check: ROUGE-1 {:.3} vs ROUGE-L {:.3}",
        rouge_n("b a", "a b", 1),
        rouge_l("b a", "a b")
    );
}
