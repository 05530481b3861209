//! Command-line front end of the experiment harness.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::experiment::{Condition, Experiment, ExperimentConfig, ExperimentError, RunKey};
use crate::train::{CfLoss, Mode};

#[derive(Debug, Parser)]
#[command(name = "sscr", version, about = "Iterative image editing experiments on a synthetic grid world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use only this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Use only this training fraction.
    #[arg(long, global = true)]
    pub fraction: Option<f64>,
    /// Fixed counterfactual iteration cap instead of the sweep.
    #[arg(long = "cf-iters", global = true)]
    pub cf_iters: Option<usize>,
    #[arg(long = "cf-loss", global = true, value_enum)]
    pub cf_loss: Option<CfLossArg>,
    /// Select the zero-shot split for single-run commands.
    #[arg(long = "zero-shot", global = true)]
    pub zero_shot: bool,
    /// No progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the episode splits and their checksums.
    GenData,
    /// Pretrain and freeze the explainer for one data condition.
    PretrainExplainer,
    /// Train one editor run.
    Train,
    /// Re-evaluate a trained run on the test split.
    Eval,
    /// Modes x fractions x seeds grid.
    AblateScarcity,
    /// Counterfactual iteration sweep and explainer-vs-discriminator loss.
    AblateCfIters,
    /// Runs without the held-out color-shape combinations.
    ZeroShot,
    /// PNG strips of predicted and true images per turn.
    Render {
        #[arg(long, default_value_t = 4)]
        episodes: usize,
    },
    /// Tables, sign tests and plots over all run reports.
    Summarize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Baseline,
    Ctc,
    Sscr,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Ctc => Mode::Ctc,
            ModeArg::Sscr => Mode::Sscr,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CfLossArg {
    Explainer,
    Discriminator,
}

impl From<CfLossArg> for CfLoss {
    fn from(c: CfLossArg) -> Self {
        match c {
            CfLossArg::Explainer => CfLoss::Explainer,
            CfLossArg::Discriminator => CfLoss::Discriminator,
        }
    }
}

impl Cli {
    /// The config file (or defaults) with the flags applied.
    pub fn config(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ExperimentError::Config(format!("{}: {e}", p.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(f) = self.fraction {
            cfg.fractions = vec![f];
        }
        if let Some(m) = self.mode {
            cfg.train.mode = m.into();
        }
        if let Some(n) = self.cf_iters {
            cfg.train.cf_iterations = Some(n);
        }
        if let Some(l) = self.cf_loss {
            cfg.train.cf_loss = l.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn condition(&self, cfg: &ExperimentConfig) -> Condition {
        if self.zero_shot {
            Condition::ZeroShot
        } else {
            Condition::Scarcity(cfg.fractions.first().copied().unwrap_or(1.0))
        }
    }

    fn key(&self, cfg: &ExperimentConfig) -> RunKey {
        RunKey {
            mode: cfg.train.mode,
            cf_loss: cfg.train.cf_loss,
            condition: self.condition(cfg),
            seed: cfg.seeds[0],
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = cli.config()?;
    let key = cli.key(&cfg);
    let condition = cli.condition(&cfg);
    let mut exp = Experiment::new(cfg)?;
    exp.verbose = !cli.quiet;
    match &cli.command {
        Command::GenData => print!("{}", exp.gen_data()?),
        Command::PretrainExplainer => {
            let (_, report) = exp.pretrain_explainer(condition)?;
            println!("{}", serde_json::to_string_pretty(&report.quality)?);
        }
        Command::Train => {
            let r = exp.train(&key)?;
            println!("{}", serde_json::to_string_pretty(&r.test)?);
        }
        Command::Eval => {
            let (r, same) = exp.eval(&key)?;
            println!("{}", r.to_json());
            println!("matches archived report: {}", if same { "yes" } else { "no" });
        }
        Command::AblateScarcity => print!("{}", exp.ablate_scarcity()?.markdown()),
        Command::AblateCfIters => print!("{}", exp.ablate_cf_iters()?.markdown()),
        Command::ZeroShot => print!("{}", exp.zero_shot()?.markdown()),
        Command::Render { episodes } => println!("{}", exp.render(&key, *episodes)?.display()),
        Command::Summarize => print!("{}", exp.summarize()?.markdown()),
    }
    Ok(())
}
