//! Editor training with the explainer loss, the counterfactual phase and
//! checkpoint evaluation.

use std::cell::Cell;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{shuffled_indices, Episode};
use crate::diff::{AdamConfig, DiffError, Graph, Tensor};
use crate::editor::{self, discriminate, generate, rotate, Editor, EditorError, TEXT};
use crate::encoder::{self, patches_tensor};
use crate::explainer::{self, instructions_of, target_ids, Explainer};
use crate::instructions::{intervene_with, Instruction, Vocabulary, DEFAULT_REPLACE_PROB};
use crate::metrics::MetricsReport;
use crate::scene::{Image, ObjectSpec, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Adversarial loss only.
    Baseline,
    /// Adversarial loss plus the explainer loss.
    Ctc,
    /// `Ctc` followed by the counterfactual phase.
    Sscr,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Ctc, Mode::Sscr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ctc => "ctc",
            Mode::Sscr => "sscr",
        }
    }

    pub fn uses_explainer(self) -> bool {
        self != Mode::Baseline
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the counterfactual phase takes its loss from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfLoss {
    Explainer,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed counterfactual iteration cap; `None` selects one from
    /// `cf_sweep` by validation F1.
    pub cf_iterations: Option<usize>,
    pub cf_sweep: Vec<usize>,
    pub cf_loss: CfLoss,
    pub replace_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sscr,
            epochs: 20,
            batch_size: 16,
            cf_iterations: None,
            cf_sweep: vec![0, 25, 50, 100, 200, 400],
            cf_loss: CfLoss::Explainer,
            replace_prob: DEFAULT_REPLACE_PROB,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size < 2 {
            return Err("batch_size must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.replace_prob) {
            return Err(format!("replace_prob {} outside [0, 1]", self.replace_prob));
        }
        if self.cf_iterations.is_none() && self.mode == Mode::Sscr && self.cf_sweep.is_empty() {
            return Err("cf_sweep is empty and no cf_iterations given".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("mode `{0}` needs a pretrained explainer")]
    MissingExplainer(Mode),
    #[error("explainer must be frozen before editor training")]
    ExplainerNotFrozen,
    #[error("config: {0}")]
    Config(String),
    #[error("need at least 2 training episodes, got {0}")]
    TooFewEpisodes(usize),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error(transparent)]
    Vocabulary(#[from] crate::instructions::OutOfVocabulary),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// One row of the loss curve. Missing terms are `NaN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub phase: String,
    pub iteration: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_e: f64,
    pub loss_rec: f64,
    pub loss_cf: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub rows: Vec<CurveRow>,
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,iteration,loss_g,loss_d,loss_e,loss_rec,loss_cf\n");
        let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.phase,
                r.iteration,
                f(r.loss_g),
                f(r.loss_d),
                f(r.loss_e),
                f(r.loss_rec),
                f(r.loss_cf)
            );
        }
        s
    }

    /// Mean of a column over the rows of one phase whose iteration falls in
    /// `range` (1-based, inclusive start).
    pub fn mean(&self, phase: &str, column: fn(&CurveRow) -> f64, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.phase == phase && range.contains(&r.iteration))
            .map(column)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Counters of what a training run touched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub explainer_calls: usize,
    pub generator_steps: usize,
    pub discriminator_steps: usize,
    pub counterfactual_steps: usize,
}

/// Trains an editor. Holds the optional frozen explainer and counts how
/// often it is called.
pub struct Trainer<'a> {
    pub vocab: &'a Vocabulary,
    pub explainer: Option<&'a Explainer>,
    pub config: TrainConfig,
    explainer_calls: Cell<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(vocab: &'a Vocabulary, explainer: Option<&'a Explainer>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if let Some(e) = explainer {
            if !e.is_frozen() {
                return Err(TrainError::ExplainerNotFrozen);
            }
        }
        Ok(Self {
            vocab,
            explainer,
            config,
            explainer_calls: Cell::new(0),
        })
    }

    pub fn explainer_calls(&self) -> usize {
        self.explainer_calls.get()
    }

    fn explainer(&self, mode: Mode) -> Result<&'a Explainer, TrainError> {
        self.explainer.ok_or(TrainError::MissingExplainer(mode))
    }

    /// Adversarial editor training with teacher forcing; in `ctc` and `sscr`
    /// modes the generator also minimizes the frozen explainer's loss.
    pub fn train_editor(&self, editor: &mut Editor, data: &[Episode], curves: &mut Curves) -> Result<TrainStats, TrainError> {
        self.train_editor_with(editor, data, curves, |_, _| Ok(()))
    }

    /// [`Trainer::train_editor`] with a callback after every epoch (1-based).
    pub fn train_editor_with(
        &self,
        editor: &mut Editor,
        data: &[Episode],
        curves: &mut Curves,
        mut on_epoch: impl FnMut(usize, &Editor) -> Result<(), TrainError>,
    ) -> Result<TrainStats, TrainError> {
        let mode = self.config.mode;
        if mode.uses_explainer() {
            self.explainer(mode)?;
        }
        if data.len() < 2 {
            return Err(TrainError::TooFewEpisodes(data.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7a11);
        let mut stats = TrainStats::default();
        let mut iteration = 0;
        for epoch in 1..=self.config.epochs {
            let order = shuffled_indices(data.len(), &mut rng);
            for idx in order.chunks(self.config.batch_size) {
                if idx.len() < 2 {
                    continue;
                }
                let batch: Vec<&Episode> = idx.iter().map(|&i| &data[i]).collect();
                iteration += 1;
                let row = self.editor_batch(editor, &batch, iteration, &mut stats)?;
                curves.rows.push(row);
            }
            on_epoch(epoch, editor)?;
        }
        stats.explainer_calls = self.explainer_calls();
        Ok(stats)
    }

    fn editor_batch(&self, editor: &mut Editor, batch: &[&Episode], iteration: usize, stats: &mut TrainStats) -> Result<CurveRow, TrainError> {
        let mode = self.config.mode;
        let cfg = editor.config.clone();
        let b = batch.len();
        let inv_b = 1.0 / b as f64;
        let inv_cells = inv_b;
        let aux_scale = cfg.aux_weight * inv_b / ObjectSpec::COUNT as f64;
        let instr: Vec<Vec<Instruction>> = batch.iter().map(|e| instructions_of(e)).collect();
        let e_hist = if mode.uses_explainer() {
            let views: Vec<&[Instruction]> = instr.iter().map(Vec::as_slice).collect();
            Some(self.explainer(mode)?.histories(self.vocab, &views)?)
        } else {
            None
        };
        let index = encoder::grid_index(b);
        let adam_g = AdamConfig::with_lr(cfg.lr_generator);
        let adam_d = AdamConfig::with_lr(cfg.lr_discriminator);
        let e_weight = cfg.lr_explainer / cfg.lr_generator;
        let mut h_prev = Tensor::zeros(&[b, cfg.history_dim]);
        let (mut sum_g, mut sum_d, mut sum_e, mut sum_r) = (0.0, 0.0, 0.0, 0.0);
        let turns = instr[0].len();
        for t in 0..turns {
            let prev_img = patches_tensor(&batch.iter().map(|e| e.scene_before(t).render()).collect::<Vec<_>>());
            let cur_img = patches_tensor(&batch.iter().map(|e| e.turns[t].scene.render()).collect::<Vec<_>>());
            let now: Vec<&Instruction> = instr.iter().map(|e| &e[t]).collect();
            let ids = encoder::token_ids(self.vocab, &now)?;
            let presence = editor::presence_targets(batch.iter().map(|e| &e.turns[t].scene));

            // generator side
            let mut g = Graph::new();
            let pt = editor.text.bind(&mut g, true);
            let pg = editor.generator.bind(&mut g, true);
            let pd = editor.discriminator.bind(&mut g, false);
            let d = encoder::encode_instructions(&mut g, &pt, TEXT, &ids)?;
            let hp = g.constant(h_prev.clone());
            let h = encoder::history_step(&mut g, &pt, TEXT, d, hp)?;
            let x = g.constant(prev_img.clone());
            let v = generate(&mut g, &pg, x, h, &index)?;
            let judged = discriminate(&mut g, &pd, v, h, &index)?;
            let lg = g.bce_with_logits(judged.logit, Arc::from(vec![1.0; b]))?;
            let la = g.bce_with_logits(judged.objects, presence.clone())?;
            sum_g += g.value(lg).item() * inv_cells;
            let lg = g.affine(lg, inv_cells, 0.0);
            let la = g.affine(la, aux_scale, 0.0);
            let mut loss = g.add(lg, la)?;
            if cfg.recon_weight > 0.0 {
                let target = g.constant(cur_img.clone());
                let err = g.sub(v, target)?;
                let err = g.mul(err, err)?;
                let lr = g.sum(err);
                sum_r += g.value(lr).item() * inv_b;
                let lr = g.affine(lr, cfg.recon_weight * inv_b, 0.0);
                loss = g.add(loss, lr)?;
            }
            if let (Some(hist), Ok(ex)) = (&e_hist, self.explainer(mode)) {
                self.explainer_calls.set(self.explainer_calls.get() + 1);
                let pe = ex.store.bind(&mut g, false);
                let he = g.constant(hist[t].clone());
                let le = explainer::ctc_loss(&mut g, &pe, v, x, he, &target_ids(self.vocab, &now)?)?;
                sum_e += g.value(le).item() * inv_b;
                let le = g.affine(le, e_weight * inv_b, 0.0);
                loss = g.add(loss, le)?;
            }
            g.backward_into(loss, &mut [&mut editor.text, &mut editor.generator])?;
            editor.text.adam_step(&adam_g)?;
            editor.generator.adam_step(&adam_g)?;
            stats.generator_steps += 1;
            let h_t = g.value(h).clone();
            let fake = g.value(v).clone();
            drop(g);

            // discriminator side, wrong history from another episode's turn
            let mut g = Graph::new();
            let pt = editor.text.bind(&mut g, false);
            let pd = editor.discriminator.bind(&mut g, true);
            let h = g.constant(h_t.clone());
            let wrong_ids = rotate(&ids);
            let dw = encoder::encode_instructions(&mut g, &pt, TEXT, &wrong_ids)?;
            let hp = g.constant(h_prev.clone());
            let hw = encoder::history_step(&mut g, &pt, TEXT, dw, hp)?;
            let real = g.constant(cur_img);
            let fake = g.constant(fake);
            let s_real = discriminate(&mut g, &pd, real, h, &index)?;
            let s_fake = discriminate(&mut g, &pd, fake, h, &index)?;
            let s_wrong = discriminate(&mut g, &pd, real, hw, &index)?;
            let l_real = g.bce_with_logits(s_real.logit, Arc::from(vec![1.0; b]))?;
            let l_fake = g.bce_with_logits(s_fake.logit, Arc::from(vec![0.0; b]))?;
            let l_wrong = g.bce_with_logits(s_wrong.logit, Arc::from(vec![0.0; b]))?;
            let l_false = g.add(l_fake, l_wrong)?;
            let l_false = g.affine(l_false, 0.5, 0.0);
            let ld = g.add(l_real, l_false)?;
            let ld = g.affine(ld, inv_cells, 0.0);
            sum_d += g.value(ld).item();
            let la = g.bce_with_logits(s_real.objects, presence)?;
            let la = g.affine(la, aux_scale, 0.0);
            let ld = g.add(ld, la)?;
            g.backward_into(ld, &mut [&mut editor.discriminator])?;
            editor.discriminator.adam_step(&adam_d)?;
            stats.discriminator_steps += 1;
            h_prev = h_t;
        }
        let n = turns as f64;
        Ok(CurveRow {
            phase: "editor".into(),
            iteration,
            loss_g: sum_g / n,
            loss_d: sum_d / n,
            loss_e: if e_hist.is_some() { sum_e / n } else { f64::NAN },
            loss_rec: if cfg.recon_weight > 0.0 { sum_r / n } else { f64::NAN },
            loss_cf: f64::NAN,
        })
    }

    /// Counterfactual phase: each iteration draws a batch, intervenes on
    /// every instruction and updates the generator side on the loss of the
    /// counterfactual result. `on_checkpoint` runs after every iteration
    /// listed in `checkpoints` (and for 0 before the first).
    pub fn counterfactual_phase(
        &self,
        editor: &mut Editor,
        data: &[Episode],
        iterations: usize,
        checkpoints: &[usize],
        curves: &mut Curves,
        mut on_checkpoint: impl FnMut(usize, &Editor) -> Result<(), TrainError>,
    ) -> Result<TrainStats, TrainError> {
        let ex = self.explainer(Mode::Sscr)?;
        if data.len() < 2 {
            return Err(TrainError::TooFewEpisodes(data.len()));
        }
        editor.text.reset_optimizer();
        editor.generator.reset_optimizer();
        let mut stats = TrainStats::default();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xcf);
        if checkpoints.contains(&0) {
            on_checkpoint(0, editor)?;
        }
        let b = self.config.batch_size.min(data.len());
        let index = encoder::grid_index(b);
        let adam = AdamConfig::with_lr(editor.config.lr_counterfactual);
        for it in 1..=iterations {
            let picks = sample(&mut rng, data.len(), b).into_vec();
            let batch: Vec<&Episode> = picks.iter().map(|&i| &data[i]).collect();
            let instr: Vec<Vec<Instruction>> = batch.iter().map(|e| instructions_of(e)).collect();
            let views: Vec<&[Instruction]> = instr.iter().map(Vec::as_slice).collect();
            let e_hist = ex.histories(self.vocab, &views)?;
            let mut h_prev = Tensor::zeros(&[b, editor.config.history_dim]);
            let mut sum = 0.0;
            for t in 0..instr[0].len() {
                let prev_img = patches_tensor(&batch.iter().map(|e| e.scene_before(t).render()).collect::<Vec<_>>());
                let real: Vec<&Instruction> = instr.iter().map(|e| &e[t]).collect();
                let cf: Vec<Instruction> = real
                    .iter()
                    .map(|i| intervene_with(i, &mut rng, self.config.replace_prob))
                    .collect();
                let cf_refs: Vec<&Instruction> = cf.iter().collect();
                let mut g = Graph::new();
                let pt = editor.text.bind(&mut g, true);
                let pg = editor.generator.bind(&mut g, true);
                let hp = g.constant(h_prev.clone());
                let dc = encoder::encode_instructions(&mut g, &pt, TEXT, &encoder::token_ids(self.vocab, &cf_refs)?)?;
                let hc = encoder::history_step(&mut g, &pt, TEXT, dc, hp)?;
                let x = g.constant(prev_img);
                let v = generate(&mut g, &pg, x, hc, &index)?;
                let loss = match self.config.cf_loss {
                    CfLoss::Explainer => {
                        self.explainer_calls.set(self.explainer_calls.get() + 1);
                        let pe = ex.store.bind(&mut g, false);
                        let he = g.constant(e_hist[t].clone());
                        explainer::ctc_loss(&mut g, &pe, v, x, he, &target_ids(self.vocab, &cf_refs)?)?
                    }
                    CfLoss::Discriminator => {
                        let pd = editor.discriminator.bind(&mut g, false);
                        let judged = discriminate(&mut g, &pd, v, hc, &index)?;
                        g.bce_with_logits(judged.logit, Arc::from(vec![1.0; b]))?
                    }
                };
                let loss = g.affine(loss, 1.0 / b as f64, 0.0);
                sum += g.value(loss).item();
                // real history for the next turn
                let dr = encoder::encode_instructions(&mut g, &pt, TEXT, &encoder::token_ids(self.vocab, &real)?)?;
                let hr = encoder::history_step(&mut g, &pt, TEXT, dr, hp)?;
                h_prev = g.value(hr).clone();
                g.backward_into(loss, &mut [&mut editor.text, &mut editor.generator])?;
                editor.text.adam_step(&adam)?;
                editor.generator.adam_step(&adam)?;
                stats.counterfactual_steps += 1;
            }
            curves.rows.push(CurveRow {
                phase: "counterfactual".into(),
                iteration: it,
                loss_g: f64::NAN,
                loss_d: f64::NAN,
                loss_e: f64::NAN,
                loss_rec: f64::NAN,
                loss_cf: sum / instr[0].len() as f64,
            });
            if checkpoints.contains(&it) {
                on_checkpoint(it, editor)?;
            }
        }
        Ok(stats)
    }
}

/// Produces the final image of each episode from its instructions alone.
pub trait Rollout {
    fn final_images(&self, vocab: &Vocabulary, episodes: &[Vec<Instruction>]) -> Result<Vec<Image>, EditorError>;
}

impl Rollout for Editor {
    fn final_images(&self, vocab: &Vocabulary, episodes: &[Vec<Instruction>]) -> Result<Vec<Image>, EditorError> {
        let mut out = Vec::with_capacity(episodes.len());
        for chunk in episodes.chunks(64) {
            for imgs in self.rollout(vocab, chunk)? {
                out.push(imgs.into_iter().last().unwrap_or_else(Image::background));
            }
        }
        Ok(out)
    }
}

/// Perfect editor: detects the current image, executes the parsed
/// instruction symbolically and renders the result.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleEditor;

impl Rollout for OracleEditor {
    fn final_images(&self, _vocab: &Vocabulary, episodes: &[Vec<Instruction>]) -> Result<Vec<Image>, EditorError> {
        Ok(episodes
            .iter()
            .map(|instr| {
                instr.iter().fold(Image::background(), |img, i| {
                    let scene = img.detect();
                    match i.parse().map(|e| scene.apply_edit(&e)) {
                        Ok(Ok(next)) => next.render(),
                        _ => img,
                    }
                })
            })
            .collect())
    }
}

/// Rolls out every episode without teacher forcing and scores the detected
/// final scene against the true final scene.
pub fn evaluate(model: &impl Rollout, vocab: &Vocabulary, episodes: &[Episode]) -> Result<MetricsReport, EditorError> {
    let instr: Vec<Vec<Instruction>> = episodes.iter().map(instructions_of).collect();
    let finals = model.final_images(vocab, &instr)?;
    let detected: Vec<Scene> = finals.iter().map(Image::detect).collect();
    Ok(MetricsReport::from_pairs(
        episodes.iter().zip(&detected).map(|(e, p)| (e.id, p, e.final_scene())),
    ))
}

/// `h_t` for every turn of a batch with the editor's encoders.
pub fn editor_histories(editor: &Editor, vocab: &Vocabulary, instr: &[Vec<Instruction>]) -> Result<Vec<Tensor>, EditorError> {
    let b = instr.len();
    let mut h = Tensor::zeros(&[b, editor.config.history_dim]);
    let mut out = Vec::new();
    for t in 0..instr.first().map_or(0, Vec::len) {
        let now: Vec<&Instruction> = instr.iter().map(|e| &e[t]).collect();
        let d = editor::encode_batch(editor, vocab, &now)?;
        h = editor::history_values(editor, d, h)?;
        out.push(h.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_episodes, intermediate_reads};
    use crate::editor::EditorConfig;
    use crate::explainer::ExplainerConfig;

    fn small_editor(vocab: &Vocabulary, seed: u64) -> Editor {
        let cfg = EditorConfig {
            embedding: 6,
            instruction_dim: 6,
            history_dim: 6,
            feature_dim: 4,
            generator_hidden: 5,
            discriminator_hidden: 5,
            ..Default::default()
        };
        Editor::new(cfg, vocab, seed).unwrap()
    }

    fn small_explainer(vocab: &Vocabulary) -> Explainer {
        let cfg = ExplainerConfig {
            embedding: 4,
            instruction_dim: 4,
            history_dim: 4,
            feature_dim: 3,
            memory_dim: 3,
            decoder_hidden: 4,
            token_embedding: 3,
            epochs: 0,
            batch_size: 4,
            lr: 1e-3,
        };
        let mut e = Explainer::new(cfg, vocab, 0).unwrap();
        e.freeze();
        e
    }

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 1,
            batch_size: 4,
            cf_iterations: Some(2),
            ..Default::default()
        }
    }

    #[test]
    fn baseline_never_calls_explainer() {
        let vocab = Vocabulary::standard();
        let ex = small_explainer(&vocab);
        let data = generate_episodes(8, 0);
        let mut ed = small_editor(&vocab, 0);
        let tr = Trainer::new(&vocab, Some(&ex), cfg(Mode::Baseline)).unwrap();
        let mut curves = Curves::default();
        let stats = tr.train_editor(&mut ed, &data, &mut curves).unwrap();
        assert_eq!(tr.explainer_calls(), 0);
        assert_eq!(stats.generator_steps, stats.discriminator_steps);
        assert_eq!(stats.generator_steps, 2 * 5);
        assert_eq!(ed.generator.step_count(), ed.discriminator.step_count());
        assert!(curves.rows.iter().all(|r| r.loss_e.is_nan()));
    }

    #[test]
    fn ctc_without_explainer_is_error() {
        let vocab = Vocabulary::standard();
        let mut ed = small_editor(&vocab, 0);
        let tr = Trainer::new(&vocab, None, cfg(Mode::Ctc)).unwrap();
        let err = tr.train_editor(&mut ed, &generate_episodes(4, 0), &mut Curves::default());
        assert!(matches!(err, Err(TrainError::MissingExplainer(Mode::Ctc))));
    }

    #[test]
    fn counterfactual_phase_touches_only_generator_side() {
        let vocab = Vocabulary::standard();
        let ex = small_explainer(&vocab);
        let data = generate_episodes(8, 1);
        let mut ed = small_editor(&vocab, 0);
        let before_d = ed.discriminator.checksum();
        let before_e = ex.store.checksum();
        let before_g = ed.generator.checksum();
        for loss in [CfLoss::Explainer, CfLoss::Discriminator] {
            let tr = Trainer::new(&vocab, Some(&ex), TrainConfig { cf_loss: loss, ..cfg(Mode::Sscr) }).unwrap();
            let mut seen = Vec::new();
            tr.counterfactual_phase(&mut ed, &data, 2, &[0, 2], &mut Curves::default(), |it, _| {
                seen.push(it);
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, [0, 2]);
        }
        assert_eq!(ed.discriminator.checksum(), before_d);
        assert_eq!(ex.store.checksum(), before_e);
        assert_ne!(ed.generator.checksum(), before_g);
    }

    #[test]
    fn counterfactual_phase_is_deterministic() {
        let vocab = Vocabulary::standard();
        let ex = small_explainer(&vocab);
        let data = generate_episodes(8, 1);
        let run = || {
            let mut ed = small_editor(&vocab, 3);
            let tr = Trainer::new(&vocab, Some(&ex), cfg(Mode::Sscr)).unwrap();
            let mut c = Curves::default();
            tr.counterfactual_phase(&mut ed, &data, 3, &[], &mut c, |_, _| Ok(())).unwrap();
            (ed.checksums(), c.to_csv())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_scores_perfectly_without_intermediate_scenes() {
        let vocab = Vocabulary::standard();
        let eps = generate_episodes(20, 4);
        let before = intermediate_reads();
        let r = evaluate(&OracleEditor, &vocab, &eps).unwrap();
        assert_eq!(intermediate_reads(), before);
        assert_eq!((r.f1, r.relsim), (1.0, 1.0));
    }

    #[test]
    fn untrained_editor_scores_near_zero() {
        let vocab = Vocabulary::standard();
        let eps = generate_episodes(10, 4);
        let r = evaluate(&small_editor(&vocab, 9), &vocab, &eps).unwrap();
        assert!(r.f1 < 0.2, "{}", r.f1);
        let again = evaluate(&small_editor(&vocab, 9), &vocab, &eps).unwrap();
        assert_eq!(r.to_json(), again.to_json());
    }
}
