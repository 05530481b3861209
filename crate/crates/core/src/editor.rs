//! The iterative editor: instruction/history encoders, generator and
//! conditional discriminator.
//!
//! Images are handled as grids of 8x8 cells, each cell a 48-value patch.
//! The generator predicts a per-cell write mask and per-cell content and
//! blends them over the previous image:
//!
//! ```text
//! V_t = V_{t-1} + m * (c - V_{t-1}),   m, c = G(f(V_{t-1}), h_t)
//! ```

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::nn::{self, conv3x3, init_linear, linear, tile_rows};
use crate::diff::{Bound, DiffError, Graph, ParameterStore, Tensor, Var};
use crate::encoder::{self, TextDims};
use crate::instructions::{Instruction, OutOfVocabulary, Vocabulary};
use crate::scene::{Image, ObjectSpec, Scene, CELLS, GRID, PATCH};

pub const TEXT: &str = "text";
const POS: usize = 2 * GRID;
const LEAK: f64 = 0.2;
/// Scale of the discriminator's sum pooling over cells.
const POOL_SCALE: f64 = 0.125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub embedding: usize,
    pub instruction_dim: usize,
    pub history_dim: usize,
    /// Per-cell image feature width.
    pub feature_dim: usize,
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
    /// Initial bias of the write-mask logit.
    pub mask_bias: f64,
    /// Weight of the auxiliary object-presence loss in both players'
    /// objectives.
    pub aux_weight: f64,
    /// Weight of the teacher-forced reconstruction loss on the generator:
    /// summed squared pixel error per image.
    pub recon_weight: f64,
    pub lr_generator: f64,
    /// Learning rate attached to the explainer loss; applied as the weight
    /// `lr_explainer / lr_generator` on that loss.
    pub lr_explainer: f64,
    pub lr_discriminator: f64,
    pub lr_counterfactual: f64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            embedding: 32,
            instruction_dim: 64,
            history_dim: 64,
            feature_dim: 32,
            generator_hidden: 32,
            discriminator_hidden: 32,
            mask_bias: -3.0,
            aux_weight: 5.0,
            recon_weight: 1.0,
            lr_generator: 1e-3,
            lr_explainer: 1e-4,
            lr_discriminator: 4e-3,
            lr_counterfactual: 5e-5,
        }
    }
}

impl EditorConfig {
    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.embedding,
            self.instruction_dim,
            self.history_dim,
            self.feature_dim,
            self.generator_hidden,
            self.discriminator_hidden,
        ];
        if dims.contains(&0) {
            return Err("editor dimensions must be positive".into());
        }
        if !self.instruction_dim.is_multiple_of(2) {
            return Err("instruction_dim must be even".into());
        }
        for lr in [
            self.lr_generator,
            self.lr_explainer,
            self.lr_discriminator,
            self.lr_counterfactual,
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(format!("learning rate {lr} must be positive"));
            }
        }
        Ok(())
    }

    pub fn text_dims(&self, vocab: usize) -> TextDims {
        TextDims {
            vocab,
            embedding: self.embedding,
            instruction: self.instruction_dim,
            history: self.history_dim,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EditorError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Vocabulary(#[from] OutOfVocabulary),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the editor, split by optimizer: the text encoders train
/// with the generator, the discriminator on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct Editor {
    pub config: EditorConfig,
    pub vocab_size: usize,
    pub text: ParameterStore,
    pub generator: ParameterStore,
    pub discriminator: ParameterStore,
}

impl Editor {
    pub fn new(config: EditorConfig, vocab: &Vocabulary, seed: u64) -> Result<Self, EditorError> {
        config.validate().map_err(EditorError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = ParameterStore::new();
        encoder::init_text_encoder(&mut text, TEXT, config.text_dims(vocab.len()), &mut rng)?;
        let generator = init_generator(&config, &mut rng)?;
        let discriminator = init_discriminator(&config, &mut rng)?;
        Ok(Self {
            config,
            vocab_size: vocab.len(),
            text,
            generator,
            discriminator,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), EditorError> {
        std::fs::create_dir_all(dir)?;
        let cfg = toml::to_string(&self.config).map_err(|e| EditorError::Config(e.to_string()))?;
        std::fs::write(dir.join("editor.toml"), cfg)?;
        self.text.save(&dir.join("text.ckpt"))?;
        self.generator.save(&dir.join("generator.ckpt"))?;
        self.discriminator.save(&dir.join("discriminator.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self, EditorError> {
        let cfg = std::fs::read_to_string(dir.join("editor.toml"))?;
        let config: EditorConfig = toml::from_str(&cfg).map_err(|e| EditorError::Config(e.to_string()))?;
        Ok(Self {
            config,
            vocab_size: vocab.len(),
            text: ParameterStore::load(&dir.join("text.ckpt"))?,
            generator: ParameterStore::load(&dir.join("generator.ckpt"))?,
            discriminator: ParameterStore::load(&dir.join("discriminator.ckpt"))?,
        })
    }

    pub fn checksums(&self) -> [u64; 3] {
        [
            self.text.checksum(),
            self.generator.checksum(),
            self.discriminator.checksum(),
        ]
    }

    /// Free-running rollout: each turn's prediction is the next turn's
    /// input. Returns the images after every turn for every episode.
    pub fn rollout(&self, vocab: &Vocabulary, episodes: &[Vec<Instruction>]) -> Result<Vec<Vec<Image>>, EditorError> {
        let batch = episodes.len();
        if batch == 0 {
            return Ok(Vec::new());
        }
        let turns = episodes.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = Tensor::zeros(&[batch, self.config.history_dim]);
        let mut prev = encoder::patches_tensor(&vec![Image::background(); batch]);
        let mut out = vec![Vec::with_capacity(turns); batch];
        let index = encoder::grid_index(batch);
        for t in 0..turns {
            let instr: Vec<&Instruction> = episodes.iter().map(|e| &e[t.min(e.len() - 1)]).collect();
            let ids = encoder::token_ids(vocab, &instr)?;
            let mut g = Graph::new();
            let pt = self.text.bind(&mut g, false);
            let pg = self.generator.bind(&mut g, false);
            let d = encoder::encode_instructions(&mut g, &pt, TEXT, &ids)?;
            let hp = g.constant(h);
            let ht = encoder::history_step(&mut g, &pt, TEXT, d, hp)?;
            let x = g.constant(prev);
            let v = generate(&mut g, &pg, x, ht, &index)?;
            h = g.value(ht).clone();
            prev = g.value(v).clone();
            for (b, img) in encoder::images_from_patches(&prev).into_iter().enumerate() {
                if t < episodes[b].len() {
                    out[b].push(img);
                }
            }
        }
        Ok(out)
    }
}

pub fn init_generator(cfg: &EditorConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore, DiffError> {
    let (f, hid, h) = (cfg.feature_dim, cfg.generator_hidden, cfg.history_dim);
    let mut s = ParameterStore::new();
    init_linear(&mut s, "img.embed", PATCH, f, rng)?;
    init_linear(&mut s, "img.conv", 9 * (f + POS), hid, rng)?;
    init_linear(&mut s, "gen.gamma", h, hid, rng)?;
    init_linear(&mut s, "gen.beta", h, hid, rng)?;
    init_linear(&mut s, "gen.conv", 9 * hid, hid, rng)?;
    init_linear(&mut s, "gen.beta2", h, hid, rng)?;
    init_linear(&mut s, "gen.mask", hid, 1, rng)?;
    s.get_mut("gen.mask.b").expect("just created").data_mut()[0] = cfg.mask_bias;
    init_linear(&mut s, "gen.content", hid, PATCH, rng)?;
    init_linear(&mut s, "gen.paint", h, PATCH, rng)?;
    Ok(s)
}

pub fn init_discriminator(cfg: &EditorConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore, DiffError> {
    let (f, hid, h) = (cfg.feature_dim, cfg.discriminator_hidden, cfg.history_dim);
    let mut s = ParameterStore::new();
    init_linear(&mut s, "dis.embed", PATCH, f, rng)?;
    init_linear(&mut s, "dis.conv1", 9 * (f + POS), hid, rng)?;
    init_linear(&mut s, "dis.conv2", 9 * hid, hid, rng)?;
    init_linear(&mut s, "dis.out", hid, 1, rng)?;
    s.init_weight("dis.proj.w", h, hid, rng)?;
    init_linear(&mut s, "dis.aux", hid, ObjectSpec::COUNT, rng)?;
    Ok(s)
}

/// `relu(x * (1 + gamma(h)) + beta(h))` with `h` tiled over the cells.
fn film(g: &mut Graph, p: &Bound, x: Var, h: Var, gamma: &str, beta: &str) -> Result<Var, DiffError> {
    let gm = linear(g, p, gamma, h)?;
    let gm = g.affine(gm, 1.0, 1.0);
    let gm = tile_rows(g, gm, CELLS)?;
    let bt = linear(g, p, beta, h)?;
    let bt = tile_rows(g, bt, CELLS)?;
    let y = g.mul(x, gm)?;
    let y = g.add(y, bt)?;
    Ok(g.relu(y))
}

/// Image encoder `f`: per-cell features of a `[batch * CELLS, PATCH]` image.
pub fn image_features(g: &mut Graph, p: &Bound, patches: Var, index: &Arc<[Option<usize>]>) -> Result<Var, DiffError> {
    let x = encoder::cell_inputs(g, p, "img.embed", patches)?;
    conv3x3(g, p, "img.conv", x, index)
}

/// Generator: predicted image patches, `[batch * CELLS, PATCH]`, in `[0, 1]`.
pub fn generate(g: &mut Graph, p: &Bound, prev: Var, h: Var, index: &Arc<[Option<usize>]>) -> Result<Var, DiffError> {
    let f = image_features(g, p, prev, index)?;
    let c1 = film(g, p, f, h, "gen.gamma", "gen.beta")?;
    let c2 = conv3x3(g, p, "gen.conv", c1, index)?;
    let b2 = linear(g, p, "gen.beta2", h)?;
    let b2 = tile_rows(g, b2, CELLS)?;
    let c2 = g.add(c2, b2)?;
    let c2 = g.relu(c2);
    let m = linear(g, p, "gen.mask", c2)?;
    let m = g.sigmoid(m);
    let rows = g.value(m).rows();
    let m = g.reshape(m, &[rows])?;
    let c = linear(g, p, "gen.content", c2)?;
    let paint = linear(g, p, "gen.paint", h)?;
    let paint = tile_rows(g, paint, CELLS)?;
    let c = g.add(c, paint)?;
    let c = g.sigmoid(c);
    let delta = g.sub(c, prev)?;
    let delta = g.scale_rows(delta, m)?;
    g.add(prev, delta)
}

/// Discriminator outputs for a batch of images.
pub struct Judgement {
    /// Real/fake logit per image, `[batch, 1]`.
    pub logit: Var,
    /// Object-presence logits per image, `[batch, ObjectSpec::COUNT]`.
    pub objects: Var,
}

/// Projection discriminator: an unconditional conv stack pooled to `phi`,
/// scored as `w . phi + <P h, phi>`, plus an object-presence head on `phi`.
pub fn discriminate(g: &mut Graph, p: &Bound, image: Var, h: Var, index: &Arc<[Option<usize>]>) -> Result<Judgement, DiffError> {
    let x = encoder::cell_inputs(g, p, "dis.embed", image)?;
    let c1 = conv3x3(g, p, "dis.conv1", x, index)?;
    let c1 = nn::leaky_relu(g, c1, LEAK)?;
    let c2 = conv3x3(g, p, "dis.conv2", c1, index)?;
    let c2 = nn::leaky_relu(g, c2, LEAK)?;
    let phi = g.sum_groups(c2, CELLS)?;
    let phi = g.affine(phi, POOL_SCALE, 0.0);
    let plain = linear(g, p, "dis.out", phi)?;
    let ph = nn::project(g, p, "dis.proj", h)?;
    let inner = g.mul(phi, ph)?;
    let width = g.value(inner).cols();
    let ones = g.constant(Tensor::filled(&[width, 1], 1.0));
    let inner = g.matmul(inner, ones)?;
    let logit = g.add(plain, inner)?;
    let objects = linear(g, p, "dis.aux", phi)?;
    Ok(Judgement { logit, objects })
}

/// Multi-hot object-presence targets of a batch of scenes.
pub fn presence_targets<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Arc<[f64]> {
    let mut out = Vec::new();
    for s in scenes {
        let mut row = [0.0; ObjectSpec::COUNT];
        for p in s.placements() {
            row[p.spec.index()] = 1.0;
        }
        out.extend_from_slice(&row);
    }
    out.into()
}

/// Generator objective of one turn: `sum_b ln D_b`.
pub fn generator_objective(scores: &[f64]) -> f64 {
    scores.iter().map(|d| d.ln()).sum()
}

/// Discriminator objective of one turn:
/// `ln D(real) + (ln(1 - D(fake)) + ln(1 - D(wrong))) / 2`, summed over the batch.
pub fn discriminator_objective(real: &[f64], fake: &[f64], wrong: &[f64]) -> f64 {
    real.iter()
        .zip(fake)
        .zip(wrong)
        .map(|((r, f), w)| r.ln() + 0.5 * ((1.0 - f).ln() + (1.0 - w).ln()))
        .sum()
}

/// Sigmoid of raw logits.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
}

/// Rotates a batch by one so every row gets another row's item.
pub fn rotate<T: Clone>(items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    if !v.is_empty() {
        v.rotate_left(1);
    }
    v
}

/// Per-instruction encoding `d_t` of a batch, as plain values.
pub fn encode_batch(editor: &Editor, vocab: &Vocabulary, batch: &[&Instruction]) -> Result<Tensor, EditorError> {
    let ids = encoder::token_ids(vocab, batch)?;
    let mut g = Graph::new();
    let p = editor.text.bind(&mut g, false);
    let d = encoder::encode_instructions(&mut g, &p, TEXT, &ids)?;
    Ok(g.value(d).clone())
}

/// `h_t` from `d_t` and `h_{t-1}` as plain values.
pub fn history_values(editor: &Editor, d: Tensor, h_prev: Tensor) -> Result<Tensor, EditorError> {
    let mut g = Graph::new();
    let p = editor.text.bind(&mut g, false);
    let d = g.constant(d);
    let h = g.constant(h_prev);
    let h = encoder::history_step(&mut g, &p, TEXT, d, h)?;
    Ok(g.value(h).clone())
}

/// Single-image generation, for inspection and tests.
pub fn generate_image(editor: &Editor, prev: &Image, h: &[f64]) -> Result<Image, EditorError> {
    let mut g = Graph::new();
    let p = editor.generator.bind(&mut g, false);
    let x = g.constant(encoder::patches_tensor([prev]));
    let h = g.constant(Tensor::new(&[1, h.len()], h.to_vec())?);
    let v = generate(&mut g, &p, x, h, &nn::neighbourhood_index(1, GRID))?;
    Ok(encoder::images_from_patches(g.value(v)).remove(0))
}
