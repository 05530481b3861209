//! Tokenizes, parses and regenerates instructions, then shows counterfactual
//! interventions that keep the grammar but change the meaning.
//!
//! cargo run --release --example instructions -- ["add a ..."]

use sscr::instructions::{intervene, synthesize, Instruction, Vocabulary};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "add a purple cylinder on the right of the gray sphere".into());
    let instruction = Instruction::tokenize(&text)?;
    let edit = instruction.parse()?;
    println!("tokens: {:?}", instruction.kinds());
    println!(
        "edit:   target {} relation {} anchor {}",
        edit.target(),
        edit.relation(),
        edit.anchor().map_or("-".into(), |a| a.to_string())
    );
    assert_eq!(synthesize(&edit), instruction);

    let vocab = Vocabulary::standard();
    println!("vocabulary: {} entries", vocab.len());
    for seed in 0..6 {
        let cf = intervene(&instruction, seed, 0.5);
        println!("counterfactual {seed}: {cf}");
    }
    Ok(())
}
