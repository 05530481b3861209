use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{DiffError, Tensor};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

const CHECKPOINT_MAGIC: &[u8; 8] = b"SSCRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus their Adam state.
#[derive(Debug)]
pub struct ParameterStore {
    id: u64,
    slots: Vec<Slot>,
    by_name: BTreeMap<String, usize>,
    step: u64,
    frozen: bool,
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            slots: self.slots.clone(),
            by_name: self.by_name.clone(),
            step: self.step,
            frozen: self.frozen,
        }
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParameterStore {
    /// Equal when names, shapes and values match bit for bit.
    fn eq(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self.frozen == other.frozen
            && self.slots.iter().zip(&other.slots).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Variables bound onto a graph from one store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics if `name` was never registered: a model/store wiring bug.
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        let n = value.numel();
        self.by_name.insert(name.clone(), self.slots.len());
        self.slots.push(Slot {
            name,
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), DiffError> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn init_bias(&mut self, name: &str, len: usize) -> Result<(), DiffError> {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.slots[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.by_name.get(name)?;
        Some(&mut self.slots[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(|&i| self.slots[i].grad.as_slice())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Puts every parameter on `graph`. Trainable bindings feed gradients
    /// back through [`ParameterStore::accumulate`]; otherwise they are
    /// constants and gradient only flows through them to other inputs.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let v = if trainable {
                    graph.param_leaf(s.value.clone(), self.id, i)
                } else {
                    graph.constant(s.value.clone())
                };
                (s.name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds this store's parameter gradients from the last backward pass on
    /// `graph`. Gradients keep accumulating until the next optimizer step or
    /// [`ParameterStore::zero_grad`].
    pub fn accumulate(&mut self, graph: &Graph) {
        for (store, slot, g) in graph.param_grads() {
            if store != self.id {
                continue;
            }
            for (d, s) in self.slots[slot].grad.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Forgets Adam moments and the step count, as a fresh optimizer would.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for s in &mut self.slots {
            s.m.iter_mut().for_each(|x| *x = 0.0);
            s.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One bias-corrected Adam update; zeroes gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), DiffError> {
        if self.frozen {
            return Err(DiffError::Frozen);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for s in &mut self.slots {
            for (((p, g), m), v) in s
                .value
                .data_mut()
                .iter_mut()
                .zip(s.grad.iter_mut())
                .zip(s.m.iter_mut())
                .zip(s.v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }

    /// Order-sensitive hash over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.slots {
            h.write(s.name.as_bytes());
            for &d in s.value.shape() {
                h.write_usize(d);
            }
            for v in s.value.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_finite())
    }

    /// Binary checkpoint: magic, version, frozen flag, record count, then
    /// `(name, shape, little-endian f64 values)` records. Adam moments are
    /// not persisted.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[u8::from(self.frozen)])?;
        w.write_all(&(self.slots.len() as u32).to_le_bytes())?;
        for s in &self.slots {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.value.shape().len() as u32).to_le_bytes())?;
            for &d in s.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in s.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DiffError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DiffError::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::new(&shape, data)?)?;
        }
        store.frozen = flag[0] != 0;
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DiffError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DiffError> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    /// Overwrites values from `other`, which must have identical names and
    /// shapes. Keeps this store's identity and optimizer state.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), DiffError> {
        for s in &other.slots {
            let dst = self
                .get_mut(&s.name)
                .ok_or_else(|| DiffError::Checkpoint(format!("unknown parameter `{}`", s.name)))?;
            if dst.shape() != s.value.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.shape().to_vec(),
                    rhs: s.value.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(s.value.data());
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
