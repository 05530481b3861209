//! Layer building blocks shared by the editor and the explainer.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::store::{Bound, ParameterStore};
use super::DiffError;

pub fn init_linear(
    store: &mut ParameterStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), DiffError> {
    store.init_weight(&format!("{name}.w"), fan_in, fan_out, rng)?;
    store.init_bias(&format!("{name}.b"), fan_out)
}

/// `x W + b` over the trailing dimension of a 2-D `x`.
pub fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, DiffError> {
    let y = g.matmul(x, p.get(&format!("{name}.w")))?;
    g.add_bias(y, p.get(&format!("{name}.b")))
}

/// Linear map without bias.
pub fn project(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var, DiffError> {
    g.matmul(x, p.get(&format!("{name}.w")))
}

pub fn init_gru(
    store: &mut ParameterStore,
    name: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), DiffError> {
    store.init_weight(&format!("{name}.wx"), input, 3 * hidden, rng)?;
    store.init_weight(&format!("{name}.wh"), hidden, 3 * hidden, rng)?;
    store.init_bias(&format!("{name}.bx"), 3 * hidden)?;
    store.init_bias(&format!("{name}.bh"), 3 * hidden)
}

/// One gated recurrent step with reset gate `r`, update gate `z`:
///
/// ```text
/// r  = sigma(x Wr + h Ur)        z = sigma(x Wz + h Uz)
/// n  = tanh(x Wn + r * (h Un))   h' = (1 - z) * n + z * h
/// ```
pub fn gru_step(g: &mut Graph, p: &Bound, name: &str, x: Var, h: Var) -> Result<Var, DiffError> {
    let hidden = g.shape(h)[1];
    let gx = g.matmul(x, p.get(&format!("{name}.wx")))?;
    let gx = g.add_bias(gx, p.get(&format!("{name}.bx")))?;
    let gh = g.matmul(h, p.get(&format!("{name}.wh")))?;
    let gh = g.add_bias(gh, p.get(&format!("{name}.bh")))?;
    let xr = g.slice(gx, 0, hidden)?;
    let hr = g.slice(gh, 0, hidden)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let xz = g.slice(gx, hidden, 2 * hidden)?;
    let hz = g.slice(gh, hidden, 2 * hidden)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let xn = g.slice(gx, 2 * hidden, 3 * hidden)?;
    let hn = g.slice(gh, 2 * hidden, 3 * hidden)?;
    let rhn = g.mul(r, hn)?;
    let n = g.add(xn, rhn)?;
    let n = g.tanh(n);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

/// GRU step that keeps `h` unchanged on rows whose mask is zero.
pub fn masked_gru_step(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    x: Var,
    h: Var,
    mask: Var,
) -> Result<Var, DiffError> {
    let next = gru_step(g, p, name, x, h)?;
    let delta = g.sub(next, h)?;
    let delta = g.scale_rows(delta, mask)?;
    g.add(h, delta)
}

/// Single-head scaled dot-product attention of `[b, q, d]` queries over
/// `[b, n, d]` keys and values. Returns `[b, q, d]`.
pub fn attention(g: &mut Graph, query: Var, keys: Var, values: Var) -> Result<Var, DiffError> {
    let d = g.shape(query)[2];
    let scores = g.batch_matmul(query, keys, true)?;
    let scores = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let weights = g.softmax(scores);
    g.batch_matmul(weights, values, false)
}

/// Row index for a 3x3 neighbourhood gather over `batch` square grids of
/// side `side`, zero-padded at the border. Row `r * 9 + k` of the gather
/// holds neighbour `k` (row-major over `dy, dx in -1..=1`) of cell `r`.
pub fn neighbourhood_index(batch: usize, side: usize) -> Arc<[Option<usize>]> {
    let cells = side * side;
    let mut idx = Vec::with_capacity(batch * cells * 9);
    for b in 0..batch {
        for y in 0..side as isize {
            for x in 0..side as isize {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        let inside = ny >= 0 && nx >= 0 && ny < side as isize && nx < side as isize;
                        idx.push(inside.then(|| b * cells + ny as usize * side + nx as usize));
                    }
                }
            }
        }
    }
    idx.into()
}

/// 3x3 convolution over a grid of cell features stored as `[batch * side^2, c]`.
/// Weight `name.w` has shape `[9 * c, c_out]`.
pub fn conv3x3(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    x: Var,
    index: &Arc<[Option<usize>]>,
) -> Result<Var, DiffError> {
    let (rows, c) = (g.value(x).rows(), g.value(x).cols());
    let patches = g.gather_rows(x, index.clone())?;
    let patches = g.reshape(patches, &[rows, 9 * c])?;
    linear(g, p, name, patches)
}

/// Repeats each row of a `[batch, c]` tensor `per` times: `[batch * per, c]`.
pub fn tile_rows(g: &mut Graph, x: Var, per: usize) -> Result<Var, DiffError> {
    let batch = g.value(x).rows();
    let idx: Vec<Option<usize>> = (0..batch * per).map(|r| Some(r / per)).collect();
    g.gather_rows(x, idx.into())
}

/// `max(x, slope * x)` for `0 < slope < 1`, built from two `relu`s.
pub fn leaky_relu(g: &mut Graph, x: Var, slope: f64) -> Result<Var, DiffError> {
    let pos = g.relu(x);
    let neg = g.affine(x, -1.0, 0.0);
    let neg = g.relu(neg);
    let neg = g.affine(neg, -slope, 0.0);
    g.add(pos, neg)
}

/// Embedding lookup; `None` ids give zero vectors.
pub fn embed(g: &mut Graph, table: Var, ids: &[Option<usize>]) -> Result<Var, DiffError> {
    g.gather_rows(table, ids.to_vec().into())
}
