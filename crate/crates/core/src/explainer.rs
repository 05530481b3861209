//! Iterative explainer: recovers the instruction behind an image pair.
//!
//! Per-cell features `f` of both images give the difference `f_d = f_t - f_{t-1}`.
//! Each cell contributes a memory token built from `[f_d, f_{t-1}]`, the
//! history `h_{t-1}` one more, and a self-attention layer mixes them. A GRU
//! decoder started from `tanh(W [sum f_d, h_{t-1}])` attends over that
//! memory and emits one token per step until `EOS`.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{shuffled_indices, Episode};
use crate::diff::nn::{self, conv3x3, init_gru, init_linear, linear, project};
use crate::diff::{AdamConfig, Bound, DiffError, Graph, ParameterStore, Tensor, Var};
use crate::editor::EditorError;
use crate::encoder::{self, TextDims};
use crate::instructions::{Instruction, Vocabulary, BOS, EOS, MAX_TOKENS, PAD};
use crate::metrics::{explainer_quality, TextQuality};
use crate::scene::{Image, CELLS, GRID, PATCH};

pub const TEXT: &str = "text";
/// Decoder steps: the longest instruction plus `EOS`.
pub const STEPS: usize = MAX_TOKENS + 1;
const POS: usize = 2 * GRID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub embedding: usize,
    pub instruction_dim: usize,
    pub history_dim: usize,
    pub feature_dim: usize,
    pub memory_dim: usize,
    pub decoder_hidden: usize,
    pub token_embedding: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            embedding: 32,
            instruction_dim: 64,
            history_dim: 64,
            feature_dim: 32,
            memory_dim: 32,
            decoder_hidden: 64,
            token_embedding: 16,
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.embedding,
            self.instruction_dim,
            self.history_dim,
            self.feature_dim,
            self.memory_dim,
            self.decoder_hidden,
            self.token_embedding,
            self.batch_size,
        ];
        if dims.contains(&0) {
            return Err("explainer dimensions and batch size must be positive".into());
        }
        if !self.instruction_dim.is_multiple_of(2) {
            return Err("instruction_dim must be even".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explainer {
    pub config: ExplainerConfig,
    pub store: ParameterStore,
}

/// Per-epoch pretraining record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub val: TextQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochStats>,
    pub quality: TextQuality,
}

/// Inputs for one turn of a batch, as values.
pub struct TurnBatch<'a> {
    pub current: &'a Tensor,
    pub previous: &'a Tensor,
    pub history: &'a Tensor,
}

impl Explainer {
    pub fn new(config: ExplainerConfig, vocab: &Vocabulary, seed: u64) -> Result<Self, EditorError> {
        config.validate().map_err(EditorError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let dims = TextDims {
            vocab: vocab.len(),
            embedding: config.embedding,
            instruction: config.instruction_dim,
            history: config.history_dim,
        };
        encoder::init_text_encoder(&mut s, TEXT, dims, &mut rng)?;
        let (f, m, gd, h) = (
            config.feature_dim,
            config.memory_dim,
            config.decoder_hidden,
            config.history_dim,
        );
        init_linear(&mut s, "exp.embed", PATCH, f, &mut rng)?;
        init_linear(&mut s, "exp.conv", 9 * (f + POS), f, &mut rng)?;
        init_linear(&mut s, "exp.mem", 2 * f, m, &mut rng)?;
        init_linear(&mut s, "exp.hist", h, m, &mut rng)?;
        for n in ["exp.q", "exp.k", "exp.v"] {
            s.init_weight(&format!("{n}.w"), m, m, &mut rng)?;
        }
        init_linear(&mut s, "exp.init", f + h, gd, &mut rng)?;
        s.init_weight("exp.tokens", vocab.len(), config.token_embedding, &mut rng)?;
        init_gru(&mut s, "exp.dec", config.token_embedding + m, gd, &mut rng)?;
        s.init_weight("exp.query.w", gd, m, &mut rng)?;
        init_linear(&mut s, "exp.out", gd + m, vocab.len(), &mut rng)?;
        Ok(Self { config, store: s })
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn save(&self, dir: &Path) -> Result<(), EditorError> {
        std::fs::create_dir_all(dir)?;
        let cfg = toml::to_string(&self.config).map_err(|e| EditorError::Config(e.to_string()))?;
        std::fs::write(dir.join("explainer.toml"), cfg)?;
        self.store.save(&dir.join("explainer.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EditorError> {
        let cfg = std::fs::read_to_string(dir.join("explainer.toml"))?;
        let config = toml::from_str(&cfg).map_err(|e| EditorError::Config(e.to_string()))?;
        Ok(Self {
            config,
            store: ParameterStore::load(&dir.join("explainer.ckpt"))?,
        })
    }

    /// History values `h_0..h_{T-1}` for every turn of a batch of
    /// instruction sequences (index `t` is the history before turn `t`).
    pub fn histories(&self, vocab: &Vocabulary, episodes: &[&[Instruction]]) -> Result<Vec<Tensor>, EditorError> {
        let batch = episodes.len();
        let turns = episodes.iter().map(|e| e.len()).min().unwrap_or(0);
        let mut h = Tensor::zeros(&[batch, self.config.history_dim]);
        let mut out = vec![h.clone()];
        for t in 0..turns.saturating_sub(1) {
            let instr: Vec<&Instruction> = episodes.iter().map(|e| &e[t]).collect();
            let ids = encoder::token_ids(vocab, &instr)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, false);
            let d = encoder::encode_instructions(&mut g, &p, TEXT, &ids)?;
            let hp = g.constant(h);
            let hn = encoder::history_step(&mut g, &p, TEXT, d, hp)?;
            h = g.value(hn).clone();
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Teacher-forced decoding loss summed over tokens and batch, and the
    /// number of scored tokens.
    pub fn loss_values(&self, vocab: &Vocabulary, batch: &TurnBatch, targets: &[&Instruction]) -> Result<(f64, usize), EditorError> {
        let ids = target_ids(vocab, targets)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let cur = g.constant(batch.current.clone());
        let prev = g.constant(batch.previous.clone());
        let h = g.constant(batch.history.clone());
        let loss = ctc_loss(&mut g, &p, cur, prev, h, &ids)?;
        let n = ids.iter().flatten().filter(|&&t| t != PAD).count();
        Ok((g.value(loss).item(), n))
    }

    /// Greedy decode; each sequence stops before the first `EOS`.
    pub fn greedy(&self, vocab: &Vocabulary, batch: &TurnBatch) -> Result<Vec<Vec<String>>, EditorError> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let cur = g.constant(batch.current.clone());
        let prev = g.constant(batch.previous.clone());
        let h = g.constant(batch.history.clone());
        let ids = greedy_decode(&mut g, &p, cur, prev, h)?;
        Ok(ids.iter().map(|s| vocab.decode(s)).collect())
    }

    /// Quality on every turn of `episodes` with ground-truth images.
    pub fn evaluate(&self, vocab: &Vocabulary, episodes: &[Episode]) -> Result<TextQuality, EditorError> {
        let (mut nll, mut n) = (0.0, 0usize);
        let (mut hyps, mut refs) = (Vec::new(), Vec::new());
        for chunk in episodes.chunks(self.config.batch_size.max(1)) {
            let instr: Vec<Vec<Instruction>> = chunk.iter().map(instructions_of).collect();
            let views: Vec<&[Instruction]> = instr.iter().map(Vec::as_slice).collect();
            let hist = self.histories(vocab, &views)?;
            for (t, h) in hist.iter().enumerate() {
                let (cur, prev) = turn_images(chunk, t);
                let tb = TurnBatch {
                    current: &cur,
                    previous: &prev,
                    history: h,
                };
                let targets: Vec<&Instruction> = instr.iter().map(|e| &e[t]).collect();
                let (l, k) = self.loss_values(vocab, &tb, &targets)?;
                nll += l;
                n += k;
                hyps.extend(self.greedy(vocab, &tb)?);
                refs.extend(targets.iter().map(|i| i.tokens().iter().map(|t| t.text.clone()).collect::<Vec<_>>()));
            }
        }
        explainer_quality(&hyps, &refs, nll, n).map_err(|e| EditorError::Config(e.to_string()))
    }

    /// Trains on ground-truth `(O_{t-1}, O_t, h_{t-1}, I_t)` tuples with
    /// teacher forcing, then freezes.
    pub fn pretrain(
        &mut self,
        vocab: &Vocabulary,
        train: &[Episode],
        val: &[Episode],
        seed: u64,
    ) -> Result<PretrainReport, EditorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut epochs = Vec::new();
        for epoch in 0..self.config.epochs {
            let adam = AdamConfig::with_lr(self.lr_at(epoch));
            let (mut total, mut tokens) = (0.0, 0usize);
            let order = shuffled_indices(train.len(), &mut rng);
            for idx in order.chunks(self.config.batch_size) {
                let chunk: Vec<Episode> = idx.iter().map(|&i| train[i].clone()).collect();
                let (l, n) = self.train_batch(vocab, &chunk, &adam)?;
                total += l;
                tokens += n;
            }
            let train_ppl = if tokens == 0 { f64::NAN } else { (total / tokens as f64).exp() };
            let val_q = if val.is_empty() {
                TextQuality {
                    ppl: f64::NAN,
                    bleu: f64::NAN,
                    token_accuracy: f64::NAN,
                }
            } else {
                self.evaluate(vocab, val)?
            };
            epochs.push(EpochStats {
                epoch: epoch + 1,
                train_loss: total / train.len().max(1) as f64,
                train_ppl,
                val: val_q,
            });
        }
        self.freeze();
        let quality = epochs.last().map(|e| e.val).unwrap_or(TextQuality {
            ppl: f64::NAN,
            bleu: f64::NAN,
            token_accuracy: f64::NAN,
        });
        Ok(PretrainReport { epochs, quality })
    }

    /// Cosine decay from `lr` to a tenth of it over the epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.config.epochs.max(1) as f64;
        self.config.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    fn train_batch(&mut self, vocab: &Vocabulary, chunk: &[Episode], adam: &AdamConfig) -> Result<(f64, usize), EditorError> {
        let batch = chunk.len();
        let instr: Vec<Vec<Instruction>> = chunk.iter().map(instructions_of).collect();
        let (mut total, mut tokens) = (0.0, 0);
        // h_{t-2}, detached; h_{t-1} is recomputed inside each turn's graph
        let mut h_before = Tensor::zeros(&[batch, self.config.history_dim]);
        for t in 0..instr[0].len() {
            let (cur, prev) = turn_images(chunk, t);
            let targets: Vec<&Instruction> = instr.iter().map(|e| &e[t]).collect();
            let ids = target_ids(vocab, &targets)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, true);
            let h = if t == 0 {
                g.constant(h_before.clone())
            } else {
                let last: Vec<&Instruction> = instr.iter().map(|e| &e[t - 1]).collect();
                let d = encoder::encode_instructions(&mut g, &p, TEXT, &encoder::token_ids(vocab, &last)?)?;
                let hb = g.constant(h_before.clone());
                let h = encoder::history_step(&mut g, &p, TEXT, d, hb)?;
                h_before = g.value(h).clone();
                h
            };
            let c = g.constant(cur);
            let pv = g.constant(prev);
            let loss = ctc_loss(&mut g, &p, c, pv, h, &ids)?;
            total += g.value(loss).item();
            tokens += ids.iter().flatten().filter(|&&x| x != PAD).count();
            let scaled = g.affine(loss, 1.0 / batch as f64, 0.0);
            g.backward_into(scaled, &mut [&mut self.store])?;
            self.store.adam_step(adam)?;
        }
        Ok((total, tokens))
    }
}

pub fn instructions_of(ep: &Episode) -> Vec<Instruction> {
    ep.turns.iter().map(|t| t.instruction.clone()).collect()
}

/// Ground-truth `(O_t, O_{t-1})` patches for turn `t` of each episode.
pub fn turn_images(chunk: &[Episode], t: usize) -> (Tensor, Tensor) {
    let cur: Vec<Image> = chunk.iter().map(|e| e.turns[t].scene.render()).collect();
    let prev: Vec<Image> = chunk.iter().map(|e| e.scene_before(t).render()).collect();
    (encoder::patches_tensor(&cur), encoder::patches_tensor(&prev))
}

/// Decoder targets padded to [`STEPS`].
pub fn target_ids(vocab: &Vocabulary, targets: &[&Instruction]) -> Result<Vec<Vec<usize>>, EditorError> {
    Ok(targets
        .iter()
        .map(|i| vocab.target(i, STEPS))
        .collect::<Result<_, _>>()?)
}

/// Per-cell explainer features of an image batch.
pub fn features(g: &mut Graph, p: &Bound, patches: Var, index: &Arc<[Option<usize>]>) -> Result<Var, DiffError> {
    let x = encoder::cell_inputs(g, p, "exp.embed", patches)?;
    let c = conv3x3(g, p, "exp.conv", x, index)?;
    Ok(g.relu(c))
}

/// Attention memory `[batch, CELLS + 1, m]` and the decoder start state.
pub fn encode_pair(g: &mut Graph, p: &Bound, current: Var, previous: Var, h_prev: Var) -> Result<(Var, Var), DiffError> {
    let rows = g.value(current).rows();
    let batch = rows / CELLS;
    let index = encoder::grid_index(batch);
    let ft = features(g, p, current, &index)?;
    let fp = features(g, p, previous, &index)?;
    let fd = g.sub(ft, fp)?;
    let cells = g.concat(&[fd, fp])?;
    let cells = linear(g, p, "exp.mem", cells)?;
    let hist = linear(g, p, "exp.hist", h_prev)?;
    let m = g.shape(cells)[1];
    let slots = CELLS + 1;
    let from_cells: Vec<Option<usize>> = (0..batch * slots)
        .map(|r| (r % slots < CELLS).then(|| (r / slots) * CELLS + r % slots))
        .collect();
    let from_hist: Vec<Option<usize>> = (0..batch * slots)
        .map(|r| (r % slots == CELLS).then_some(r / slots))
        .collect();
    let a = g.gather_rows(cells, from_cells.into())?;
    let b = g.gather_rows(hist, from_hist.into())?;
    let x = g.add(a, b)?;
    let q = project(g, p, "exp.q", x)?;
    let k = project(g, p, "exp.k", x)?;
    let v = project(g, p, "exp.v", x)?;
    let q = g.reshape(q, &[batch, slots, m])?;
    let k = g.reshape(k, &[batch, slots, m])?;
    let v = g.reshape(v, &[batch, slots, m])?;
    let att = nn::attention(g, q, k, v)?;
    let att = g.reshape(att, &[batch * slots, m])?;
    let mem = g.add(x, att)?;
    let mem = g.reshape(mem, &[batch, slots, m])?;
    let pooled = g.sum_groups(fd, CELLS)?;
    let init = g.concat(&[pooled, h_prev])?;
    let init = linear(g, p, "exp.init", init)?;
    Ok((mem, g.tanh(init)))
}

struct DecoderState {
    hidden: Var,
    context: Var,
}

fn decoder_step(g: &mut Graph, p: &Bound, mem: Var, state: &DecoderState, tokens: &[Option<usize>]) -> Result<(DecoderState, Var), DiffError> {
    let batch = tokens.len();
    let m = g.shape(mem)[2];
    let x = nn::embed(g, p.get("exp.tokens"), tokens)?;
    let x = g.concat(&[x, state.context])?;
    let hidden = nn::gru_step(g, p, "exp.dec", x, state.hidden)?;
    let q = project(g, p, "exp.query", hidden)?;
    let q = g.reshape(q, &[batch, 1, m])?;
    let ctx = nn::attention(g, q, mem, mem)?;
    let context = g.reshape(ctx, &[batch, m])?;
    let out = g.concat(&[hidden, context])?;
    let logits = linear(g, p, "exp.out", out)?;
    Ok((DecoderState { hidden, context }, logits))
}

/// Teacher-forced logits `[batch, vocab]` for each of `targets[0].len()` steps.
pub fn decode_teacher_forced(
    g: &mut Graph,
    p: &Bound,
    current: Var,
    previous: Var,
    h_prev: Var,
    targets: &[Vec<usize>],
) -> Result<Vec<Var>, DiffError> {
    let batch = targets.len();
    let (mem, init) = encode_pair(g, p, current, previous, h_prev)?;
    let m = g.shape(mem)[2];
    let mut state = DecoderState {
        hidden: init,
        context: g.constant(Tensor::zeros(&[batch, m])),
    };
    let steps = targets.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let inp: Vec<Option<usize>> = targets
            .iter()
            .map(|t| Some(if i == 0 { BOS } else { t[i - 1] }))
            .collect();
        let (next, logits) = decoder_step(g, p, mem, &state, &inp)?;
        state = next;
        out.push(logits);
    }
    Ok(out)
}

/// `L_E`: cross-entropy summed over non-`PAD` target tokens and the batch.
pub fn ctc_loss(
    g: &mut Graph,
    p: &Bound,
    current: Var,
    previous: Var,
    h_prev: Var,
    targets: &[Vec<usize>],
) -> Result<Var, DiffError> {
    if targets.iter().any(|t| t.len() != STEPS) {
        let bad = targets.iter().map(Vec::len).find(|&l| l != STEPS).unwrap_or(0);
        return Err(DiffError::ShapeMismatch {
            op: "ctc_loss",
            lhs: vec![STEPS],
            rhs: vec![bad],
        });
    }
    let logits = decode_teacher_forced(g, p, current, previous, h_prev, targets)?;
    let mut total: Option<Var> = None;
    for (i, l) in logits.into_iter().enumerate() {
        let t: Vec<Option<usize>> = targets.iter().map(|s| (s[i] != PAD).then_some(s[i])).collect();
        let ce = g.cross_entropy(l, t.into())?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    Ok(total.expect("STEPS > 0"))
}

/// Greedy token ids for each batch row, `STEPS` long.
pub fn greedy_decode(g: &mut Graph, p: &Bound, current: Var, previous: Var, h_prev: Var) -> Result<Vec<Vec<usize>>, DiffError> {
    let batch = g.value(h_prev).rows();
    let (mem, init) = encode_pair(g, p, current, previous, h_prev)?;
    let m = g.shape(mem)[2];
    let mut state = DecoderState {
        hidden: init,
        context: g.constant(Tensor::zeros(&[batch, m])),
    };
    let mut last = vec![BOS; batch];
    let mut out = vec![Vec::with_capacity(STEPS); batch];
    for _ in 0..STEPS {
        let inp: Vec<Option<usize>> = last.iter().map(|&t| Some(t)).collect();
        let (next, logits) = decoder_step(g, p, mem, &state, &inp)?;
        state = next;
        let v = g.value(logits);
        for (b, row) in v.data().chunks(v.cols()).enumerate() {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (i, &x)| if x > a.1 { (i, x) } else { a })
                .0;
            last[b] = best;
            out[b].push(best);
        }
    }
    for seq in &mut out {
        if let Some(end) = seq.iter().position(|&t| t == EOS) {
            seq.truncate(end + 1);
        }
    }
    Ok(out)
}
