//! Generates episodes, prints one, writes a JSONL file and shows the
//! scarcity and zero-shot splits.
//!
//! cargo run --release --example dataset -- [episodes] [out.jsonl]

use sscr::dataset::{build_split, generate_episodes, save, scarce, target_specs, SplitConfig, HELD_OUT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(200);
    let out = args.next().unwrap_or_else(|| "episodes.jsonl".into());

    let episodes = generate_episodes(n, 0);
    for (t, turn) in episodes[0].turns.iter().enumerate() {
        println!("turn {t}: {:52} -> {} objects", turn.instruction.text(), turn.scene.len());
    }
    save(&episodes, out.as_ref())?;
    println!("wrote {n} episodes to {out}");

    let full = build_split(&SplitConfig::default())?;
    for f in [0.8, 0.5, 0.2] {
        println!("fraction {f}: {} training episodes", scarce(full.train.clone(), f, 0).len());
    }

    let zs = build_split(&SplitConfig::default().zero_shot())?;
    let seen = target_specs(&zs.train);
    let unseen: Vec<String> = HELD_OUT.iter().filter(|s| !seen.contains(s)).map(|s| s.to_string()).collect();
    let in_test = zs.test.iter().flat_map(|e| e.targets()).filter(|s| HELD_OUT.contains(s)).count();
    println!("zero-shot: never in training {unseen:?}; {in_test} held-out targets in test");
    Ok(())
}
