//! Trains the baseline and explainer-guided editors on one split, then runs
//! the counterfactual phase on the latter, printing validation scores as
//! training goes.
//!
//! cargo run --release --example compare_modes -- [fraction] [epochs] [cf_iterations] [seed]

use std::time::Instant;

use sscr::dataset::{build_split, SplitConfig};
use sscr::editor::{Editor, EditorConfig};
use sscr::explainer::{Explainer, ExplainerConfig};
use sscr::instructions::Vocabulary;
use sscr::train::{evaluate, Curves, Mode, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let fraction: f64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0.5);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(20);
    let cf: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(400);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let split = build_split(&SplitConfig {
        train: 600,
        val: 100,
        test: 0,
        fraction,
        ..Default::default()
    })?;
    let vocab = Vocabulary::standard();
    let start = Instant::now();
    let mut explainer = Explainer::new(ExplainerConfig::default(), &vocab, seed)?;
    let report = explainer.pretrain(&vocab, &split.train, &split.val, seed)?;
    println!(
        "explainer: bleu {:.3} acc {:.3} ({:.0?})",
        report.quality.bleu,
        report.quality.token_accuracy,
        start.elapsed()
    );
    let mut ctc_editor = None;
    for mode in [Mode::Baseline, Mode::Ctc] {
        let config = TrainConfig {
            mode,
            epochs,
            seed,
            ..Default::default()
        };
        let trainer = Trainer::new(&vocab, Some(&explainer), config)?;
        let mut editor = Editor::new(EditorConfig::default(), &vocab, seed)?;
        let mut curves = Curves::default();
        trainer.train_editor_with(&mut editor, &split.train, &mut curves, |epoch, ed| {
            if epoch % 5 == 0 || epoch == epochs {
                let r = evaluate(ed, &vocab, &split.val)?;
                println!(
                    "{mode:>8} epoch {epoch:>3}: f1 {:.3} relsim {:.3} ({:.0?})",
                    r.f1,
                    r.relsim,
                    start.elapsed()
                );
            }
            Ok(())
        })?;
        if mode == Mode::Ctc {
            ctc_editor = Some(editor);
        }
    }
    let mut editor = ctc_editor.expect("ctc run");
    let trainer = Trainer::new(
        &vocab,
        Some(&explainer),
        TrainConfig {
            seed,
            ..Default::default()
        },
    )?;
    let checkpoints: Vec<usize> = (0..=cf).step_by((cf / 8).max(1)).collect();
    trainer.counterfactual_phase(&mut editor, &split.train, cf, &checkpoints, &mut Curves::default(), |it, ed| {
        let r = evaluate(ed, &vocab, &split.val)?;
        println!("    sscr iter {it:>4}: f1 {:.3} relsim {:.3} ({:.0?})", r.f1, r.relsim, start.elapsed());
        Ok(())
    })?;
    Ok(())
}
