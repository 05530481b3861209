//! Experiment harness over an artifact tree:
//!
//! ```text
//! <out>/data/{full,zero-shot}/{train,val,test}.jsonl, data/checksums.txt
//! <out>/checkpoints/explainer/<condition>/, checkpoints/<run>/
//! <out>/reports/runs/<run>.json, reports/explainer_<condition>.json
//! <out>/curves/<run>.csv, <out>/renders/<run>.png, <out>/summary/
//! ```
//!
//! Every directory written gets a copy of the config as `config.toml`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, scarce, DatasetError, Episode, Split, SplitConfig, HELD_OUT};
use crate::editor::{Editor, EditorConfig, EditorError};
use crate::explainer::{instructions_of, Explainer, ExplainerConfig, PretrainReport};
use crate::instructions::{Instruction, Vocabulary};
use crate::metrics::MetricsReport;
use crate::scene::{write_png, IMAGE_PX};
use crate::train::{evaluate, CfLoss, Curves, Mode, TrainConfig, TrainError, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Training fractions of the scarcity grid.
    pub fractions: Vec<f64>,
    pub zero_shot: bool,
    /// Seed of explainer pretraining, shared by every editor seed.
    pub explainer_seed: u64,
    pub data: SplitConfig,
    pub explainer: ExplainerConfig,
    pub editor: EditorConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            fractions: vec![1.0, 0.8, 0.5],
            zero_shot: true,
            explainer_seed: 0,
            data: SplitConfig::default(),
            explainer: ExplainerConfig::default(),
            editor: EditorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("fraction {f} outside (0, 1]"));
        }
        if self.data.fraction != 1.0 || !self.data.held_out.is_empty() {
            return bad("data.fraction and data.held_out are set per condition, leave them at defaults".into());
        }
        self.explainer.validate().map_err(ExperimentError::Config)?;
        self.editor.validate().map_err(ExperimentError::Config)?;
        self.train.validate().map_err(ExperimentError::Config)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// Process exit status: 2 for config errors, 3 for missing
    /// prerequisites, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Missing(_) => 3,
            _ => 1,
        }
    }
}

/// Training data condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Scarcity(f64),
    ZeroShot,
}

impl Condition {
    /// `f50` for half the data, `zs` for the zero-shot split.
    pub fn tag(self) -> String {
        match self {
            Condition::Scarcity(f) => format!("f{}", (f * 100.0).round() as u32),
            Condition::ZeroShot => "zs".into(),
        }
    }

    pub fn fraction(self) -> f64 {
        match self {
            Condition::Scarcity(f) => f,
            Condition::ZeroShot => 1.0,
        }
    }
}

/// One cell of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunKey {
    pub mode: Mode,
    pub cf_loss: CfLoss,
    pub condition: Condition,
    pub seed: u64,
}

impl RunKey {
    pub fn new(mode: Mode, condition: Condition, seed: u64) -> Self {
        Self {
            mode,
            cf_loss: CfLoss::Explainer,
            condition,
            seed,
        }
    }

    /// `sscr`, or `sscr-d` when the counterfactual loss comes from D.
    pub fn label(&self) -> String {
        match (self.mode, self.cf_loss) {
            (Mode::Sscr, CfLoss::Discriminator) => "sscr-d".into(),
            (m, _) => m.name().into(),
        }
    }

    pub fn name(&self) -> String {
        format!("{}_{}_s{}", self.label(), self.condition.tag(), self.seed)
    }

    fn branch_point(&self) -> RunKey {
        RunKey {
            mode: Mode::Ctc,
            cf_loss: CfLoss::Explainer,
            ..*self
        }
    }
}

/// What a finished run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub label: String,
    pub condition: String,
    pub fraction: f64,
    pub seed: u64,
    pub train_episodes: usize,
    /// Counterfactual iterations used (`sscr` only).
    pub cf_iterations: Option<usize>,
    /// `(iterations, validation F1, validation RelSim)` per sweep cap.
    pub cf_sweep: Vec<(usize, f64, f64)>,
    pub val: MetricsReport,
    pub test: MetricsReport,
    /// Test metrics of the checkpoint the counterfactual phase started from.
    pub pre_phase: Option<MetricsReport>,
}

/// Fingerprint of everything that determines a run's result.
#[derive(Serialize)]
struct Fingerprint<'a> {
    run: String,
    explainer_seed: u64,
    data: &'a SplitConfig,
    explainer: &'a ExplainerConfig,
    editor: &'a EditorConfig,
    train: TrainConfig,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        Ok(Self {
            config,
            vocab: Vocabulary::standard(),
            verbose: false,
        })
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn dir(&self, parts: &[&str]) -> Result<PathBuf, ExperimentError> {
        let mut p = self.config.out.clone();
        p.extend(parts);
        std::fs::create_dir_all(&p)?;
        std::fs::write(p.join("config.toml"), self.config.to_toml())?;
        Ok(p)
    }

    fn require(path: PathBuf) -> Result<PathBuf, ExperimentError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(ExperimentError::Missing(path))
        }
    }

    fn data_dir(condition: Condition) -> &'static str {
        match condition {
            Condition::Scarcity(_) => "full",
            Condition::ZeroShot => "zero-shot",
        }
    }

    // ---- data ------------------------------------------------------------

    /// Writes the full split (and the zero-shot split when enabled) plus a
    /// SHA-256 line per file. Returns the checksum file's contents.
    pub fn gen_data(&self) -> Result<String, ExperimentError> {
        let root = self.dir(&["data"])?;
        let mut sums = String::new();
        let mut splits = vec![("full", self.config.data.clone())];
        if self.config.zero_shot {
            splits.push(("zero-shot", self.config.data.clone().zero_shot()));
        }
        for (name, cfg) in splits {
            let split = dataset::build_split(&cfg)?;
            let dir = self.dir(&["data", name])?;
            dataset::save_split(&split, &dir)?;
            for path in dataset::split_paths(&dir) {
                let digest = Sha256::digest(std::fs::read(&path)?);
                let rel = path.strip_prefix(&root).unwrap_or(&path);
                let _ = writeln!(sums, "{digest:x}  {}", rel.display());
            }
        }
        std::fs::write(root.join("checksums.txt"), &sums)?;
        self.note(format!("data written to {}", root.display()));
        Ok(sums)
    }

    fn ensure_data(&self, condition: Condition) -> Result<(), ExperimentError> {
        let dir = self.config.out.join("data").join(Self::data_dir(condition));
        if !dataset::split_paths(&dir).iter().all(|p| p.exists()) {
            self.gen_data()?;
        }
        Ok(())
    }

    /// The split of a condition, with training subsampled to its fraction.
    pub fn split(&self, condition: Condition) -> Result<Split, ExperimentError> {
        if condition == Condition::ZeroShot && !self.config.zero_shot {
            return Err(ExperimentError::Config("zero_shot is disabled in the config".into()));
        }
        let dir = self.config.out.join("data").join(Self::data_dir(condition));
        for p in dataset::split_paths(&dir) {
            Self::require(p)?;
        }
        let mut split = dataset::load_split(&dir)?;
        split.train = scarce(split.train, condition.fraction(), self.config.data.seed);
        if condition == Condition::ZeroShot {
            let leaked = dataset::target_specs(&split.train).into_iter().filter(|s| HELD_OUT.contains(s)).count();
            if leaked > 0 {
                return Err(ExperimentError::Config(format!("{leaked} held-out combinations in zero-shot training data")));
            }
        }
        Ok(split)
    }

    // ---- explainer -------------------------------------------------------

    fn explainer_dir(&self, condition: Condition) -> PathBuf {
        self.config.out.join("checkpoints").join("explainer").join(condition.tag())
    }

    /// Pretrains and saves the explainer of a condition.
    pub fn pretrain_explainer(&self, condition: Condition) -> Result<(Explainer, PretrainReport), ExperimentError> {
        let split = self.split(condition)?;
        self.note(format!("pretraining explainer on {} ({} episodes)", condition.tag(), split.train.len()));
        let mut e = Explainer::new(self.config.explainer.clone(), &self.vocab, self.config.explainer_seed)?;
        let report = e.pretrain(&self.vocab, &split.train, &split.val, self.config.explainer_seed)?;
        let dir = self.dir(&["checkpoints", "explainer", &condition.tag()])?;
        e.save(&dir)?;
        let reports = self.dir(&["reports"])?;
        std::fs::write(
            reports.join(format!("explainer_{}.json", condition.tag())),
            serde_json::to_string_pretty(&report)?,
        )?;
        Ok((e, report))
    }

    pub fn load_explainer(&self, condition: Condition) -> Result<Explainer, ExperimentError> {
        let dir = Self::require(self.explainer_dir(condition))?;
        Ok(Explainer::load(&dir)?)
    }

    fn ensure_explainer(&self, condition: Condition) -> Result<Explainer, ExperimentError> {
        match self.load_explainer(condition) {
            Ok(e) => Ok(e),
            Err(ExperimentError::Missing(_)) => Ok(self.pretrain_explainer(condition)?.0),
            Err(e) => Err(e),
        }
    }

    // ---- editor runs -----------------------------------------------------

    pub fn checkpoint_dir(&self, key: &RunKey) -> PathBuf {
        self.config.out.join("checkpoints").join(key.name())
    }

    pub fn report_path(&self, key: &RunKey) -> PathBuf {
        self.config.out.join("reports").join("runs").join(format!("{}.json", key.name()))
    }

    fn train_config(&self, key: &RunKey) -> TrainConfig {
        TrainConfig {
            mode: key.mode,
            cf_loss: key.cf_loss,
            seed: key.seed,
            ..self.config.train.clone()
        }
    }

    fn fingerprint(&self, key: &RunKey) -> String {
        toml::to_string(&Fingerprint {
            run: key.name(),
            explainer_seed: self.config.explainer_seed,
            data: &self.config.data,
            explainer: &self.config.explainer,
            editor: &self.config.editor,
            train: self.train_config(key),
        })
        .expect("fingerprint serializes")
    }

    /// The report of a finished run with the current config, if any.
    pub fn finished(&self, key: &RunKey) -> Result<Option<RunReport>, ExperimentError> {
        let fp = self.checkpoint_dir(key).join("run.toml");
        let report = self.report_path(key);
        if !(fp.exists() && report.exists()) || std::fs::read_to_string(&fp)? != self.fingerprint(key) {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(report)?)?))
    }

    /// Runs `key` unless a finished run with the same settings exists.
    pub fn ensure_run(&self, key: &RunKey) -> Result<RunReport, ExperimentError> {
        if let Some(r) = self.finished(key)? {
            return Ok(r);
        }
        self.ensure_data(key.condition)?;
        if key.mode.uses_explainer() {
            self.ensure_explainer(key.condition)?;
        }
        if key.mode == Mode::Sscr {
            self.ensure_run(&key.branch_point())?;
        }
        self.train(key)
    }

    /// Trains one run from its prerequisites on disk and archives the
    /// checkpoint, curves and report.
    pub fn train(&self, key: &RunKey) -> Result<RunReport, ExperimentError> {
        let split = self.split(key.condition)?;
        let explainer = if key.mode.uses_explainer() {
            Some(self.load_explainer(key.condition)?)
        } else {
            None
        };
        let trainer = Trainer::new(&self.vocab, explainer.as_ref(), self.train_config(key))?;
        let start = std::time::Instant::now();
        let mut curves = Curves::default();
        let mut report = RunReport {
            name: key.name(),
            label: key.label(),
            condition: key.condition.tag(),
            fraction: key.condition.fraction(),
            seed: key.seed,
            train_episodes: split.train.len(),
            cf_iterations: None,
            cf_sweep: Vec::new(),
            val: MetricsReport::default(),
            test: MetricsReport::default(),
            pre_phase: None,
        };
        let editor = if key.mode == Mode::Sscr {
            let base = key.branch_point();
            let dir = Self::require(self.checkpoint_dir(&base))?;
            let mut editor = Editor::load(&dir, &self.vocab)?;
            let pre: RunReport = serde_json::from_str(&std::fs::read_to_string(Self::require(self.report_path(&base))?)?)?;
            report.pre_phase = Some(pre.test);
            if let Ok(c) = std::fs::read_to_string(self.config.out.join("curves").join(format!("{}.csv", base.name()))) {
                curves.rows.extend(parse_curves(&c));
            }
            let (caps, fixed) = match self.config.train.cf_iterations {
                Some(n) => (vec![n], Some(n)),
                None => {
                    let mut caps = self.config.train.cf_sweep.clone();
                    caps.sort_unstable();
                    caps.dedup();
                    (caps, None)
                }
            };
            let last = *caps.last().expect("validated");
            let mut best: Option<(f64, usize, Editor)> = None;
            let mut sweep = Vec::new();
            trainer.counterfactual_phase(&mut editor, &split.train, last, &caps, &mut curves, |it, ed| {
                let r = evaluate(ed, &self.vocab, &split.val)?;
                sweep.push((it, r.f1, r.relsim));
                if fixed.is_none() && best.as_ref().is_none_or(|b| r.f1 > b.0) {
                    best = Some((r.f1, it, ed.clone()));
                }
                Ok(())
            })?;
            report.cf_sweep = sweep;
            match best {
                Some((_, it, ed)) => {
                    report.cf_iterations = Some(it);
                    ed
                }
                None => {
                    report.cf_iterations = Some(last);
                    editor
                }
            }
        } else {
            let mut editor = Editor::new(self.config.editor.clone(), &self.vocab, key.seed)?;
            trainer.train_editor(&mut editor, &split.train, &mut curves)?;
            editor
        };
        report.val = evaluate(&editor, &self.vocab, &split.val)?;
        report.test = evaluate(&editor, &self.vocab, &split.test)?;
        for r in [&mut report.val, &mut report.test] {
            r.seed = key.seed;
            r.checkpoint = key.name();
        }
        report.val.split = "val".into();
        report.test.split = "test".into();

        let ck = self.dir(&["checkpoints", &key.name()])?;
        editor.save(&ck)?;
        let curve_dir = self.dir(&["curves"])?;
        std::fs::write(curve_dir.join(format!("{}.csv", key.name())), curves.to_csv())?;
        self.dir(&["reports", "runs"])?;
        std::fs::write(self.report_path(key), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(ck.join("run.toml"), self.fingerprint(key))?;
        self.note(format!(
            "{}: test f1 {:.3} relsim {:.3} ({:.0?})",
            key.name(),
            report.test.f1,
            report.test.relsim,
            start.elapsed()
        ));
        Ok(report)
    }

    /// Re-evaluates an archived checkpoint on the test split. Returns the
    /// report and whether it equals the archived one.
    pub fn eval(&self, key: &RunKey) -> Result<(MetricsReport, bool), ExperimentError> {
        let editor = Editor::load(&Self::require(self.checkpoint_dir(key))?, &self.vocab)?;
        let split = self.split(key.condition)?;
        let mut report = evaluate(&editor, &self.vocab, &split.test)?;
        report.seed = key.seed;
        report.checkpoint = key.name();
        report.split = "test".into();
        let archived: Option<RunReport> = std::fs::read_to_string(self.report_path(key))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let same = archived.is_some_and(|a| a.test == report);
        let dir = self.dir(&["reports", "eval"])?;
        std::fs::write(dir.join(format!("{}.json", key.name())), report.to_json())?;
        Ok((report, same))
    }

    /// PNG strip per run: one row per episode, predicted and true image
    /// side by side for every turn; instructions go to a text file next to it.
    pub fn render(&self, key: &RunKey, episodes: usize) -> Result<PathBuf, ExperimentError> {
        let editor = Editor::load(&Self::require(self.checkpoint_dir(key))?, &self.vocab)?;
        let split = self.split(key.condition)?;
        let eps = &split.test[..episodes.min(split.test.len())];
        let instr: Vec<Vec<Instruction>> = eps.iter().map(instructions_of).collect();
        let out = editor.rollout(&self.vocab, &instr)?;
        let dir = self.dir(&["renders"])?;
        let path = dir.join(format!("{}.png", key.name()));
        let text: String = eps
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let turns: Vec<String> = e.turns.iter().map(|t| t.instruction.text()).collect();
                format!("row {i}: {}\n", turns.join(" | "))
            })
            .collect();
        write_strip(&path, eps, &out)?;
        std::fs::write(path.with_extension("txt"), text)?;
        Ok(path)
    }

    // ---- grids -----------------------------------------------------------

    pub fn scarcity_keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &f in &self.config.fractions {
            for mode in Mode::ALL {
                for &s in &self.config.seeds {
                    keys.push(RunKey::new(mode, Condition::Scarcity(f), s));
                }
            }
        }
        keys
    }

    /// Modes x fractions x seeds, then the summary.
    pub fn ablate_scarcity(&self) -> Result<Summary, ExperimentError> {
        for key in self.scarcity_keys() {
            self.ensure_run(&key)?;
        }
        self.summarize()
    }

    /// Counterfactual iteration sweep at the first configured fraction,
    /// plus the loss-source comparison (explainer against discriminator)
    /// at the cap each explainer-driven run selected.
    pub fn ablate_cf_iters(&self) -> Result<Summary, ExperimentError> {
        let condition = Condition::Scarcity(self.config.fractions[0]);
        for &s in &self.config.seeds {
            let e = self.ensure_run(&RunKey::new(Mode::Sscr, condition, s))?;
            let d = RunKey {
                cf_loss: CfLoss::Discriminator,
                ..RunKey::new(Mode::Sscr, condition, s)
            };
            let fixed = Experiment {
                config: ExperimentConfig {
                    train: TrainConfig {
                        cf_iterations: e.cf_iterations,
                        ..self.config.train.clone()
                    },
                    ..self.config.clone()
                },
                vocab: self.vocab.clone(),
                verbose: self.verbose,
            };
            fixed.ensure_run(&d)?;
        }
        self.summarize()
    }

    /// Baseline, ctc and sscr trained without the held-out combinations and
    /// tested on the full test set.
    pub fn zero_shot(&self) -> Result<Summary, ExperimentError> {
        if !self.config.zero_shot {
            return Err(ExperimentError::Config("zero_shot is disabled in the config".into()));
        }
        for mode in Mode::ALL {
            for &s in &self.config.seeds {
                self.ensure_run(&RunKey::new(mode, Condition::ZeroShot, s))?;
            }
        }
        self.summarize()
    }

    // ---- summary ---------------------------------------------------------

    pub fn load_reports(&self) -> Result<Vec<RunReport>, ExperimentError> {
        let dir = self.config.out.join("reports").join("runs");
        let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect(),
            Err(_) => Vec::new(),
        };
        if paths.is_empty() {
            return Err(ExperimentError::Missing(dir));
        }
        paths.sort();
        paths
            .iter()
            .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
            .collect()
    }

    /// Tables, sign tests and plots over every run report on disk.
    pub fn summarize(&self) -> Result<Summary, ExperimentError> {
        let reports = self.load_reports()?;
        let summary = Summary::from_reports(&reports);
        let dir = self.dir(&["summary"])?;
        std::fs::write(dir.join("summary.csv"), summary.csv())?;
        std::fs::write(dir.join("verdicts.csv"), summary.verdicts_csv())?;
        std::fs::write(dir.join("summary.md"), summary.markdown())?;
        std::fs::write(dir.join("scarcity.svg"), summary.scarcity_plot())?;
        std::fs::write(dir.join("cf_sweep.svg"), cf_sweep_plot(&reports))?;
        if let Some(svg) = self.curve_plot(&reports)? {
            std::fs::write(dir.join("curves.svg"), svg)?;
        }
        Ok(summary)
    }

    /// Smoothed L_G and L_E of the first seed's baseline and ctc runs at the
    /// first condition that has both.
    fn curve_plot(&self, reports: &[RunReport]) -> Result<Option<String>, ExperimentError> {
        let Some(pick) = reports.iter().find(|r| {
            r.label == "ctc" && reports.iter().any(|b| b.label == "baseline" && b.condition == r.condition && b.seed == r.seed)
        }) else {
            return Ok(None);
        };
        let mut series = Vec::new();
        for label in ["baseline", "ctc"] {
            let path = self.config.out.join("curves").join(format!("{label}_{}_s{}.csv", pick.condition, pick.seed));
            let Ok(text) = std::fs::read_to_string(path) else {
                continue;
            };
            let rows: Vec<_> = parse_curves(&text).into_iter().filter(|r| r.phase == "editor").collect();
            series.push((format!("{label} L_G"), smooth(rows.iter().map(|r| (r.iteration as f64, r.loss_g)))));
            if label == "ctc" {
                series.push(("ctc L_E / 10".into(), smooth(rows.iter().map(|r| (r.iteration as f64, r.loss_e / 10.0)))));
            }
        }
        Ok(Some(line_chart("training losses", "iteration", "loss", &series)))
    }
}

fn parse_curves(text: &str) -> Vec<crate::train::CurveRow> {
    let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 7).then(|| crate::train::CurveRow {
                phase: f[0].to_string(),
                iteration: f[1].parse().unwrap_or(0),
                loss_g: num(f[2]),
                loss_d: num(f[3]),
                loss_e: num(f[4]),
                loss_rec: num(f[5]),
                loss_cf: num(f[6]),
            })
        })
        .collect()
}

/// Means over windows of 20 points, skipping `NaN`s.
fn smooth(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.filter(|p| p.1.is_finite()).collect();
    pts.chunks(20)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

fn write_strip(path: &Path, eps: &[Episode], predicted: &[Vec<crate::scene::Image>]) -> std::io::Result<()> {
    const SCALE: usize = 4;
    const GAP: usize = 2;
    let side = IMAGE_PX * SCALE;
    let turns = eps.iter().map(|e| e.turns.len()).max().unwrap_or(0);
    let w = turns * (2 * side + GAP) + GAP;
    let h = eps.len() * (side + GAP) + GAP;
    let mut rgb = vec![96u8; w * h * 3];
    for (r, (ep, imgs)) in eps.iter().zip(predicted).enumerate() {
        for (t, turn) in ep.turns.iter().enumerate() {
            for (k, img) in [&imgs[t], &turn.scene.render()].into_iter().enumerate() {
                let px = img.to_rgb8();
                let ox = GAP + t * (2 * side + GAP) + k * side;
                let oy = GAP + r * (side + GAP);
                for y in 0..side {
                    for x in 0..side {
                        let src = ((y / SCALE) * IMAGE_PX + x / SCALE) * 3;
                        let dst = ((oy + y) * w + ox + x) * 3;
                        rgb[dst..dst + 3].copy_from_slice(&px[src..src + 3]);
                    }
                }
            }
        }
    }
    write_png(path, w, h, &rgb)
}

// ---- summary tables ---------------------------------------------------------

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (m, s)
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub condition: String,
    pub fraction: f64,
    pub label: String,
    pub seeds: usize,
    pub f1: (f64, f64),
    pub relsim: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub claim: String,
    pub condition: String,
    pub metric: String,
    pub wins: usize,
    /// Paired seeds with a nonzero gap; exact ties are left out of the test.
    pub pairs: usize,
    pub ties: usize,
    pub mean_gap: f64,
    pub p: f64,
}

impl Verdict {
    /// Every paired seed agrees with the claim.
    pub fn pass(&self) -> bool {
        self.pairs > 0 && self.wins == self.pairs
    }
}

/// Test F1, test RelSim, pre-phase RelSim.
type SeedScores = (f64, f64, Option<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<Row>,
    pub verdicts: Vec<Verdict>,
    /// Condition, label, seed -> scores.
    scores: BTreeMap<(String, String, u64), SeedScores>,
}

fn label_order(label: &str) -> usize {
    ["baseline", "ctc", "sscr", "sscr-d"].iter().position(|l| *l == label).unwrap_or(9)
}

fn display(label: &str) -> &str {
    match label {
        "baseline" => "baseline",
        "ctc" => "CTC-only",
        "sscr" => "SSCR",
        "sscr-d" => "SSCR (D)",
        other => other,
    }
}

impl Summary {
    pub fn from_reports(reports: &[RunReport]) -> Self {
        let mut scores = BTreeMap::new();
        let mut fractions = BTreeMap::new();
        for r in reports {
            scores.insert(
                (r.condition.clone(), r.label.clone(), r.seed),
                (r.test.f1, r.test.relsim, r.pre_phase.as_ref().map(|p| p.relsim)),
            );
            fractions.insert(r.condition.clone(), r.fraction);
        }
        let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
        for ((c, l, _), (f1, rs, _)) in &scores {
            groups.entry((c.clone(), l.clone())).or_default().push((*f1, *rs));
        }
        let mut rows: Vec<Row> = groups
            .into_iter()
            .map(|((c, l), v)| Row {
                fraction: fractions[&c],
                condition: c,
                label: l,
                seeds: v.len(),
                f1: mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>()),
                relsim: mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>()),
            })
            .collect();
        rows.sort_by(|a, b| {
            (a.condition == "zs")
                .cmp(&(b.condition == "zs"))
                .then(b.fraction.total_cmp(&a.fraction))
                .then(label_order(&a.label).cmp(&label_order(&b.label)))
        });
        let mut s = Self {
            rows,
            verdicts: Vec::new(),
            scores,
        };
        s.verdicts = s.compute_verdicts();
        s
    }

    fn seeds_of(&self, condition: &str, label: &str) -> BTreeMap<u64, SeedScores> {
        self.scores
            .iter()
            .filter(|((c, l, _), _)| c == condition && l == label)
            .map(|((_, _, s), v)| (*s, *v))
            .collect()
    }

    /// Sign test of `holds` over paired per-seed gaps, ties dropped.
    fn verdict(&self, claim: String, condition: &str, metric: &str, gaps: Vec<f64>, holds: fn(f64) -> bool) -> Option<Verdict> {
        let decided = gaps.iter().filter(|g| **g != 0.0).count();
        if decided < 2 {
            return None;
        }
        let wins = gaps.iter().filter(|g| **g != 0.0 && holds(**g)).count();
        Some(Verdict {
            claim,
            condition: condition.into(),
            metric: metric.into(),
            wins,
            pairs: decided,
            ties: gaps.len() - decided,
            mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
            p: sign_test_p(wins, decided),
        })
    }

    fn compute_verdicts(&self) -> Vec<Verdict> {
        let mut out = Vec::new();
        let conditions: Vec<String> = {
            let mut c: Vec<String> = self.rows.iter().map(|r| r.condition.clone()).collect();
            c.dedup();
            c
        };
        let pairs = |a: &BTreeMap<u64, SeedScores>, b: &BTreeMap<u64, SeedScores>, m: fn(&SeedScores) -> f64| {
            a.iter()
                .filter_map(|(s, x)| b.get(s).map(|y| m(x) - m(y)))
                .collect::<Vec<f64>>()
        };
        for c in &conditions {
            for (hi, lo) in [("sscr", "ctc"), ("ctc", "baseline"), ("sscr", "baseline")] {
                let (a, b) = (self.seeds_of(c, hi), self.seeds_of(c, lo));
                let claim = format!("{} > {}", display(hi), display(lo));
                out.extend(self.verdict(claim.clone(), c, "f1", pairs(&a, &b, |x| x.0), |g| g > 0.0));
                out.extend(self.verdict(claim, c, "relsim", pairs(&a, &b, |x| x.1), |g| g > 0.0));
            }
            let gains = |label: &str| -> Vec<f64> {
                self.seeds_of(c, label)
                    .values()
                    .filter_map(|v| v.2.map(|pre| v.1 - pre))
                    .collect()
            };
            let claim = "counterfactual phase from E improves RelSim".to_string();
            out.extend(self.verdict(claim, c, "relsim", gains("sscr"), |g| g > 0.0));
            let claim = "counterfactual phase from D does not improve RelSim".to_string();
            out.extend(self.verdict(claim, c, "relsim", gains("sscr-d"), |g| g <= 0.0));
        }
        let scarce: Vec<&String> = conditions.iter().filter(|c| c.starts_with('f') && c.as_str() != "f100").collect();
        for c in scarce {
            let drop = |label: &str| {
                let full = self.seeds_of("f100", label);
                let low = self.seeds_of(c, label);
                full.iter()
                    .filter_map(|(s, x)| low.get(s).map(|y| (*s, x.0 - y.0)))
                    .collect::<BTreeMap<u64, f64>>()
            };
            let (s, b) = (drop("sscr"), drop("baseline"));
            let gaps: Vec<f64> = s.iter().filter_map(|(k, ds)| b.get(k).map(|db| db - ds)).collect();
            let claim = format!("SSCR drops less than baseline from f100 to {c}");
            out.extend(self.verdict(claim, c, "f1", gaps, |g| g > 0.0));
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("condition,fraction,mode,seeds,f1_mean,f1_std,relsim_mean,relsim_std\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.condition, r.fraction, r.label, r.seeds, r.f1.0, r.f1.1, r.relsim.0, r.relsim.1
            );
        }
        s
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = String::from("claim,condition,metric,wins,pairs,ties,mean_gap,p,verdict\n");
        for v in &self.verdicts {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.4},{}",
                v.claim,
                v.condition,
                v.metric,
                v.wins,
                v.pairs,
                v.ties,
                v.mean_gap,
                v.p,
                if v.pass() { "PASS" } else { "FAIL" }
            );
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Summary\n\n| condition | mode | seeds | F1 | RelSim |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
                r.condition,
                display(&r.label),
                r.seeds,
                100.0 * r.f1.0,
                100.0 * r.f1.1,
                100.0 * r.relsim.0,
                100.0 * r.relsim.1
            );
        }
        s.push_str("\n## Sign tests\n\n");
        if self.verdicts.is_empty() {
            s.push_str("Not enough paired seeds with a nonzero gap for a sign test.\n");
        }
        for v in &self.verdicts {
            let _ = writeln!(
                s,
                "- {} ({}, {}): {} (wins {}/{}, ties {}, mean gap {:+.4}, p = {:.3})",
                v.claim,
                v.condition,
                v.metric,
                if v.pass() { "PASS" } else { "FAIL" },
                v.wins,
                v.pairs,
                v.ties,
                v.mean_gap,
                v.p
            );
        }
        s
    }

    /// F1 against training fraction, one line per mode.
    pub fn scarcity_plot(&self) -> String {
        let mut series: BTreeMap<usize, (String, Vec<(f64, f64)>)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.condition != "zs") {
            let e = series
                .entry(label_order(&r.label))
                .or_insert_with(|| (display(&r.label).to_string(), Vec::new()));
            e.1.push((100.0 * r.fraction, 100.0 * r.f1.0));
        }
        let mut list: Vec<(String, Vec<(f64, f64)>)> = series.into_values().collect();
        for s in &mut list {
            s.1.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        line_chart("F1 by training fraction", "training data (%)", "F1", &list)
    }
}

fn cf_sweep_plot(reports: &[RunReport]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .filter(|r| r.label == "sscr" && r.cf_sweep.len() > 1)
        .map(|r| {
            (
                format!("{} s{}", r.condition, r.seed),
                r.cf_sweep.iter().map(|&(it, f1, _)| (it as f64, 100.0 * f1)).collect(),
            )
        })
        .collect();
    line_chart("validation F1 by counterfactual iterations", "iterations", "F1", &series)
}

/// Minimal SVG line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#, H / 2.0, H / 2.0);
    for (v, px, anchor, x, y) in [
        (x0, sx(x0), "middle", sx(x0), H - M + 16.0),
        (x1, sx(x1), "middle", sx(x1), H - M + 16.0),
        (y0, sy(y0), "end", M - 6.0, sy(y0) + 4.0),
        (y1, sy(y1), "end", M - 6.0, sy(y1) + 4.0),
    ] {
        let _ = px;
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|q| q.0.is_finite() && q.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{t}" y="{}">{name}</text>"#,
            ly + 4.0,
            a = W - M - 130.0,
            b = W - M - 110.0,
            t = W - M - 104.0
        );
    }
    s.push_str("</svg>\n");
    s
}
