//! Runs a miniature version of the whole experiment in a scratch directory:
//! data, explainer pretraining, the three training modes over two seeds and
//! the summary with its sign-test verdicts.
//!
//! cargo run --release --example pipeline -- [out_dir]

use sscr::dataset::SplitConfig;
use sscr::experiment::{Experiment, ExperimentConfig};
use sscr::explainer::ExplainerConfig;
use sscr::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pipeline-runs".into());
    let config = ExperimentConfig {
        out: out.into(),
        seeds: vec![0, 1],
        fractions: vec![1.0, 0.5],
        zero_shot: false,
        data: SplitConfig {
            train: 120,
            val: 20,
            test: 20,
            ..Default::default()
        },
        explainer: ExplainerConfig {
            epochs: 10,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 10,
            cf_sweep: vec![0, 10, 20],
            ..Default::default()
        },
        ..Default::default()
    };
    println!("{}", config.to_toml());
    let mut exp = Experiment::new(config)?;
    exp.verbose = true;
    print!("{}", exp.gen_data()?);
    exp.ablate_scarcity()?;
    let summary = exp.summarize()?;
    print!("{}", summary.markdown());
    println!("outputs under {}", exp.out().display());
    Ok(())
}
