//! Instruction and history encoders, plus the cell-grid helpers shared by
//! every image network.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::nn::{self, init_gru};
use crate::diff::{Bound, DiffError, Graph, ParameterStore, Tensor, Var};
use crate::instructions::{Instruction, OutOfVocabulary, Vocabulary};
use crate::scene::{Image, CELLS, GRID, PATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDims {
    pub vocab: usize,
    pub embedding: usize,
    /// Width of `d_t`; each direction of the bidirectional GRU gets half.
    pub instruction: usize,
    pub history: usize,
}

pub fn init_text_encoder(
    store: &mut ParameterStore,
    prefix: &str,
    dims: TextDims,
    rng: &mut ChaCha8Rng,
) -> Result<(), DiffError> {
    if !dims.instruction.is_multiple_of(2) {
        return Err(DiffError::InvalidShape(vec![dims.instruction]));
    }
    store.init_weight(&format!("{prefix}.embed"), dims.vocab, dims.embedding, rng)?;
    init_gru(store, &format!("{prefix}.fwd"), dims.embedding, dims.instruction / 2, rng)?;
    init_gru(store, &format!("{prefix}.bwd"), dims.embedding, dims.instruction / 2, rng)?;
    init_gru(store, &format!("{prefix}.hist"), dims.instruction, dims.history, rng)
}

/// Token ids for a batch of instructions.
pub fn token_ids(vocab: &Vocabulary, batch: &[&Instruction]) -> Result<Vec<Vec<usize>>, OutOfVocabulary> {
    batch.iter().map(|i| vocab.encode(i)).collect()
}

/// Bidirectional GRU over each instruction; `d_t` is the concatenation of
/// the last forward and last backward states. `[batch, instruction]`.
pub fn encode_instructions(g: &mut Graph, p: &Bound, prefix: &str, ids: &[Vec<usize>]) -> Result<Var, DiffError> {
    let batch = ids.len();
    if batch == 0 {
        return Err(DiffError::Empty("encode_instructions"));
    }
    let half = g.shape(p.get(&format!("{prefix}.fwd.wh")))[0];
    let table = p.get(&format!("{prefix}.embed"));
    let max_len = ids.iter().map(Vec::len).max().unwrap_or(0);
    let step_inputs = |g: &mut Graph, i: usize| -> Result<(Var, Var), DiffError> {
        let tok: Vec<Option<usize>> = ids.iter().map(|s| s.get(i).copied()).collect();
        let mask: Vec<f64> = tok.iter().map(|t| if t.is_some() { 1.0 } else { 0.0 }).collect();
        let x = nn::embed(g, table, &tok)?;
        let m = g.constant(Tensor::new(&[batch], mask)?);
        Ok((x, m))
    };
    let mut fwd = g.constant(Tensor::zeros(&[batch, half]));
    for i in 0..max_len {
        let (x, m) = step_inputs(g, i)?;
        fwd = nn::masked_gru_step(g, p, &format!("{prefix}.fwd"), x, fwd, m)?;
    }
    let mut bwd = g.constant(Tensor::zeros(&[batch, half]));
    for i in (0..max_len).rev() {
        let (x, m) = step_inputs(g, i)?;
        bwd = nn::masked_gru_step(g, p, &format!("{prefix}.bwd"), x, bwd, m)?;
    }
    g.concat(&[fwd, bwd])
}

/// `h_t = GRU(d_t, h_{t-1})`.
pub fn history_step(g: &mut Graph, p: &Bound, prefix: &str, d: Var, h_prev: Var) -> Result<Var, DiffError> {
    nn::gru_step(g, p, &format!("{prefix}.hist"), d, h_prev)
}

/// One-hot column and row of every cell: `[batch * CELLS, 2 * GRID]`.
pub fn position_features(batch: usize) -> Tensor {
    let mut data = vec![0.0; batch * CELLS * 2 * GRID];
    for (r, row) in data.chunks_mut(2 * GRID).enumerate() {
        let cell = r % CELLS;
        row[cell % GRID] = 1.0;
        row[GRID + cell / GRID] = 1.0;
    }
    Tensor::new(&[batch * CELLS, 2 * GRID], data).expect("sized")
}

/// Cell-major patches of a batch of images: `[batch * CELLS, PATCH]`.
pub fn patches_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        data.extend(img.to_patches());
        n += 1;
    }
    Tensor::new(&[n * CELLS, PATCH], data).expect("patch layout")
}

/// Splits a `[batch * CELLS, PATCH]` tensor back into images.
pub fn images_from_patches(t: &Tensor) -> Vec<Image> {
    t.data()
        .chunks(CELLS * PATCH)
        .map(|c| Image::from_patches(c).expect("patch layout"))
        .collect()
}

/// Embeds every cell patch and appends its position: `[batch * CELLS, f + 16]`.
pub fn cell_inputs(g: &mut Graph, p: &Bound, name: &str, patches: Var) -> Result<Var, DiffError> {
    let rows = g.value(patches).rows();
    let e = nn::linear(g, p, name, patches)?;
    let e = g.relu(e);
    let pos = g.constant(position_features(rows / CELLS));
    g.concat(&[e, pos])
}

/// Cached 3x3 neighbourhood index for `batch` grids.
pub fn grid_index(batch: usize) -> Arc<[Option<usize>]> {
    nn::neighbourhood_index(batch, GRID)
}
