//! Pretrains the explainer on ground-truth image pairs and prints its
//! validation quality per epoch, then accuracy per instruction slot.
//!
//! cargo run --release --example pretrain_explainer -- [train_episodes] [epochs]

use std::time::Instant;

use sscr::dataset::{build_split, SplitConfig};
use sscr::explainer::{instructions_of, turn_images, Explainer, ExplainerConfig, TurnBatch};
use sscr::instructions::{Instruction, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let train: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(600);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(12);
    let split = build_split(&SplitConfig {
        train,
        val: 100,
        test: 0,
        ..Default::default()
    })?;
    let vocab = Vocabulary::standard();
    let config = ExplainerConfig {
        epochs,
        ..Default::default()
    };
    let mut explainer = Explainer::new(config, &vocab, 7)?;
    let start = Instant::now();
    let report = explainer.pretrain(&vocab, &split.train, &split.val, 7)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  train ppl {:.3}  val ppl {:.3}  bleu {:.3}  token acc {:.3}",
            e.epoch, e.train_ppl, e.val.ppl, e.val.bleu, e.val.token_accuracy
        );
    }
    println!("frozen: {}  elapsed {:.1?}", explainer.is_frozen(), start.elapsed());

    // slot accuracy over relative instructions: target colour, target
    // object, relation, anchor colour, anchor object
    let slots = [2, 3, 4, 6, 7];
    let mut hits = [0usize; 5];
    let mut total = 0usize;
    let instr: Vec<Vec<Instruction>> = split.val.iter().map(instructions_of).collect();
    let views: Vec<&[Instruction]> = instr.iter().map(Vec::as_slice).collect();
    let hist = explainer.histories(&vocab, &views)?;
    for (t, h) in hist.iter().enumerate().skip(1) {
        let (cur, prev) = turn_images(&split.val, t);
        let decoded = explainer.greedy(&vocab, &TurnBatch { current: &cur, previous: &prev, history: h })?;
        for (hyp, ep) in decoded.iter().zip(&instr) {
            total += 1;
            for (k, &s) in slots.iter().enumerate() {
                if hyp.get(s).map(String::as_str) == Some(ep[t].tokens()[s].text.as_str()) {
                    hits[k] += 1;
                }
            }
        }
    }
    let names = ["colour", "object", "relation", "anchor colour", "anchor object"];
    for (n, h) in names.iter().zip(hits) {
        println!("{n:>14}: {:.3}", h as f64 / total as f64);
    }
    Ok(())
}
