//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and accumulates gradients into node buffers; trainable
//! parameter leaves are then folded into their owning [`ParameterStore`].

use std::sync::Arc;

use super::store::ParameterStore;
use super::{DiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, slot: usize },
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    GatherRows { x: Var, index: Arc<[Option<usize>]> },
    Reshape(Var),
    SumGroups { x: Var, group: usize },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Arc<[Option<usize>]> },
    BceWithLogits { logits: Var, targets: Arc<[f64]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Cheap to create; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c (+)= op(a) * op(b)` where `a` is `m x k` and `b` is `k x n` after the
/// optional transposes. Transposed operands are given in their stored layout.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (readable through [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `v`'s value cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn param_leaf(&mut self, value: Tensor, store: u64, slot: usize) -> Var {
        self.push(value, Op::Param { store, slot }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Batched product of `[n, m, k]` by `[n, k, p]` (or `[n, p, k]` when
    /// `transpose_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; bn * m * p];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            gemm(
                m,
                k,
                p,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * p..(i + 1) * k * p],
                transpose_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[bn, m, p], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            ng,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, data).expect("shape checked"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a `[m]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddBias(x, bias), ng))
    }

    /// Multiplies row `r` of `x` by `scale[r]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var, DiffError> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if self.value(scale).numel() != rows {
            return Err(mismatch("scale_rows", self.shape(x), self.shape(scale)));
        }
        let s = self.value(scale).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(s)
            .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(scale);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ScaleRows(x, scale), ng))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(
            Tensor::new(&shape, data).expect("same shape"),
            Op::Affine { x, scale },
            ng,
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data).expect("same shape"), op, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Concatenation along the trailing dimension; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Empty("concat"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows = self.value(first).rows();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of the trailing dimension.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let cols = self.value(x).cols();
        if start >= end || end > cols {
            return Err(mismatch("slice", self.shape(x), &[start, end]));
        }
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("non-empty shape") = end - start;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x, start }, ng))
    }

    /// Builds `[index.len(), cols]` by copying rows of `x`; `None` yields a
    /// zero row. Covers embedding lookup, tiling and 3x3 neighbourhoods.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[Option<usize>]>) -> Result<Var, DiffError> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if index.is_empty() {
            return Err(DiffError::Empty("gather_rows"));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", self.shape(x), &[*bad]));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; index.len() * cols];
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = i {
                data[r * cols..(r + 1) * cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[index.len(), cols], data)?,
            Op::GatherRows { x, index },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Sums consecutive groups of `group` rows: `[n * group, m] -> [n, m]`.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var, DiffError> {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        if group == 0 || rows % group != 0 {
            return Err(mismatch("sum_groups", self.shape(x), &[group]));
        }
        let n = rows / group;
        let mut data = vec![0.0; n * cols];
        for (r, row) in self.value(x).data().chunks(cols).enumerate() {
            let dst = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[n, cols], data)?, Op::SumGroups { x, group }, ng))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, data).expect("same shape"), Op::Softmax(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Summed softmax cross-entropy of `[n, classes]` logits; rows whose
    /// target is `None` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Arc<[Option<usize>]>,
    ) -> Result<Var, DiffError> {
        let (rows, cols) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut loss = 0.0;
        for (row, t) in self.value(logits).data().chunks(cols).zip(targets.iter()) {
            let Some(t) = *t else { continue };
            if t >= cols {
                return Err(mismatch("cross_entropy", &[rows, cols], &[t]));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets }, ng))
    }

    /// Summed binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<[f64]>) -> Result<Var, DiffError> {
        if targets.len() != self.value(logits).numel() {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| y * softplus(-z) + (1.0 - y) * softplus(z))
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets }, ng))
    }

    /// Computes gradients of the scalar `loss` with respect to every node
    /// that needs one. Gradients from a previous call are discarded; use
    /// [`ParameterStore::accumulate`] to fold them into parameters.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.value(loss).numel() != 1 {
            return Err(DiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into
    /// every store that owns a leaf on this graph.
    pub fn backward_into(
        &mut self,
        loss: Var,
        stores: &mut [&mut ParameterStore],
    ) -> Result<(), DiffError> {
        self.backward(loss)?;
        for s in stores.iter_mut() {
            s.accumulate(self);
        }
        Ok(())
    }

    /// `(store id, slot, gradient)` for every parameter leaf reached by the
    /// last backward pass.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, usize, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { store, slot } => self.grads.get(i)?.as_deref().map(|g| (store, slot, g)),
            _ => None,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bv = nodes[b.0].value.data();
                let av = nodes[a.0].value.data();
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, true));
                acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, true));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = nodes[a.0].value.shape();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for t in 0..bn {
                        let gi = &g[t * m * p..(t + 1) * m * p];
                        let bi = &bv[t * k * p..(t + 1) * k * p];
                        // a b => g b^T ; a b^T => g b
                        gemm(m, p, k, gi, false, bi, !transpose_b, &mut da[t * m * k..(t + 1) * m * k], true);
                    }
                });
                acc(*b, &mut |db| {
                    for t in 0..bn {
                        let gi = &g[t * m * p..(t + 1) * m * p];
                        let ai = &av[t * m * k..(t + 1) * m * k];
                        let dbi = &mut db[t * k * p..(t + 1) * k * p];
                        if *transpose_b {
                            gemm(p, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, p, ai, true, gi, false, dbi, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                let cols = out.cols();
                acc(*bias, &mut |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let cols = out.cols();
                let (xv, sv) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                acc(*x, &mut |d| {
                    for ((drow, grow), &sc) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(sv) {
                        for (dd, gg) in drow.iter_mut().zip(grow) {
                            *dd += gg * sc;
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for ((dd, grow), xrow) in d.iter_mut().zip(g.chunks(cols)).zip(xv.chunks(cols)) {
                        *dd += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g));
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        if *y > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let w = out.cols();
                let cols = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(w)) {
                        add_into(&mut drow[*start..start + w], grow);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let cols = out.cols();
                acc(*x, &mut |d| {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            add_into(&mut d[s * cols..(s + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::SumGroups { x, group } => {
                let cols = out.cols();
                acc(*x, &mut |d| {
                    for (r, drow) in d.chunks_mut(cols).enumerate() {
                        add_into(drow, &g[(r / group) * cols..(r / group + 1) * cols]);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dd, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::CrossEntropy { logits, targets } => {
                let cols = nodes[logits.0].value.cols();
                let z = nodes[logits.0].value.data();
                acc(*logits, &mut |d| {
                    for ((drow, zrow), t) in d.chunks_mut(cols).zip(z.chunks(cols)).zip(targets.iter()) {
                        let Some(t) = *t else { continue };
                        let max = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = zrow.iter().map(|v| (v - max).exp()).sum();
                        for (j, (dd, zz)) in drow.iter_mut().zip(zrow).enumerate() {
                            let p = (zz - max).exp() / sum;
                            *dd += g[0] * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = nodes[logits.0].value.data();
                acc(*logits, &mut |d| {
                    for ((dd, zz), y) in d.iter_mut().zip(z).zip(targets.iter()) {
                        *dd += g[0] * (sigmoid(*zz) - y);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
