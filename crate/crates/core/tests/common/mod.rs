//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscr::diff::{Bound, Graph, ParameterStore, Tensor, Var};
use sscr::scene::{ObjectSpec, Placement, Scene, GRID};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between backward and finite differences.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding compare on an absolute scale. Central differences of an O(10)
/// loss carry about 1e-10 of rounding noise at this step.
pub const GRAD_FLOOR: f64 = 1e-5;

pub struct GradReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes redrawn because the two step sizes disagreed (a kink of
    /// `relu` inside the step).
    pub kinks: usize,
}

/// Random tensor with values in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Scalar view of whatever `build` returns: `sum(w * out)` with fixed random
/// weights, or the value itself when it is already a scalar.
fn scalarize(g: &mut Graph, out: Var) -> Var {
    if g.value(out).numel() == 1 {
        return g.reshape(out, &[1]).unwrap();
    }
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1a7);
    let w = g.constant(random_tensor(&shape, 1.0, &mut rng));
    let y = g.mul(out, w).unwrap();
    g.sum(y)
}

fn evaluate(store: &ParameterStore, build: &dyn Fn(&mut Graph, &Bound) -> Var) -> f64 {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let out = build(&mut g, &p);
    let l = scalarize(&mut g, out);
    g.value(l).item()
}

fn central(store: &mut ParameterStore, name: &str, i: usize, h: f64, build: &dyn Fn(&mut Graph, &Bound) -> Var) -> f64 {
    let orig = store.get(name).unwrap().data()[i];
    store.get_mut(name).unwrap().data_mut()[i] = orig + h;
    let up = evaluate(store, build);
    store.get_mut(name).unwrap().data_mut()[i] = orig - h;
    let down = evaluate(store, build);
    store.get_mut(name).unwrap().data_mut()[i] = orig;
    (up - down) / (2.0 * h)
}

/// Compares backward gradients of every value in `store` against central
/// differences at `probes` randomly drawn coordinates.
pub fn gradcheck(
    store: &mut ParameterStore,
    probes: usize,
    seed: u64,
    build: impl Fn(&mut Graph, &Bound) -> Var,
) -> GradReport {
    store.zero_grad();
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let out = build(&mut g, &p);
    let l = scalarize(&mut g, out);
    g.backward_into(l, &mut [&mut *store]).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    let analytic: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| (n.clone(), store.grad(n).unwrap().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel_error: 0.0,
        probes: 0,
        kinks: 0,
    };
    while report.probes < probes {
        let mut k = rng.gen_range(0..total);
        let mut slot = 0;
        while k >= sizes[slot] {
            k -= sizes[slot];
            slot += 1;
        }
        let name = &names[slot];
        let coarse = central(store, name, k, FD_STEP, &build);
        let fine = central(store, name, k, FD_STEP / 2.0, &build);
        if (coarse - fine).abs() > 1e-6 * coarse.abs().max(1.0) {
            report.kinks += 1;
            assert!(report.kinks <= probes, "finite differences never settle");
            continue;
        }
        let a = analytic[name][k];
        let rel = (a - coarse).abs() / a.abs().max(coarse.abs()).max(GRAD_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.probes += 1;
    }
    report
}

pub fn random_scene(rng: &mut ChaCha8Rng, max_objects: usize) -> Scene {
    let n = rng.gen_range(0..=max_objects);
    let mut specs: Vec<ObjectSpec> = ObjectSpec::all().collect();
    let mut cells: Vec<(usize, usize)> = (0..GRID).flat_map(|y| (0..GRID).map(move |x| (x, y))).collect();
    let mut out = Vec::new();
    for _ in 0..n {
        let s = specs.swap_remove(rng.gen_range(0..specs.len()));
        let (x, y) = cells.swap_remove(rng.gen_range(0..cells.len()));
        out.push(Placement { spec: s, x, y });
    }
    Scene::from_placements(out).unwrap()
}

/// A perturbed copy of `truth`: some objects dropped, some moved, some
/// recoloured, some spurious ones added.
pub fn perturbed_scene(truth: &Scene, rng: &mut ChaCha8Rng) -> Scene {
    let mut used_specs = BTreeSet::new();
    let mut used_cells = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |p: Placement, out: &mut Vec<Placement>| {
        if used_specs.insert(p.spec) && used_cells.insert((p.x, p.y)) {
            out.push(p);
        }
    };
    for p in truth.placements() {
        let mut q = *p;
        match rng.gen_range(0..5) {
            0 => continue,
            1 => {
                q.x = rng.gen_range(0..GRID);
                q.y = rng.gen_range(0..GRID);
            }
            2 => q.spec = ObjectSpec::from_index(rng.gen_range(0..ObjectSpec::COUNT)).unwrap(),
            _ => {}
        }
        push(q, &mut out);
    }
    for _ in 0..rng.gen_range(0..3) {
        let q = Placement {
            spec: ObjectSpec::from_index(rng.gen_range(0..ObjectSpec::COUNT)).unwrap(),
            x: rng.gen_range(0..GRID),
            y: rng.gen_range(0..GRID),
        };
        push(q, &mut out);
    }
    Scene::from_placements(out).unwrap()
}

/// Brute-force precision, recall and F1 over object identities.
pub fn oracle_prf(predicted: &Scene, truth: &Scene) -> (f64, f64, f64) {
    let pred: Vec<ObjectSpec> = predicted.placements().iter().map(|p| p.spec).collect();
    let gt: Vec<ObjectSpec> = truth.placements().iter().map(|p| p.spec).collect();
    let hits = pred.iter().filter(|s| gt.contains(s)).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { hits / pred.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { hits / gt.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Relations between two cells spelled out as strings, from scratch.
fn relations(a: (usize, usize), b: (usize, usize)) -> Vec<&'static str> {
    let mut r = Vec::new();
    if a.0 < b.0 {
        r.push("left");
    }
    if a.0 > b.0 {
        r.push("right");
    }
    if a.1 < b.1 {
        r.push("behind");
    }
    if a.1 > b.1 {
        r.push("front");
    }
    r
}

/// Brute-force relational similarity: enumerates every ordered pair of
/// ground-truth objects and checks each relation against the prediction.
pub fn oracle_relsim(predicted: &Scene, truth: &Scene) -> f64 {
    let (_, recall, _) = oracle_prf(predicted, truth);
    let pos = |s: &Scene, spec: ObjectSpec| s.placements().iter().find(|p| p.spec == spec).map(|p| (p.x, p.y));
    let mut total = 0usize;
    let mut kept = 0usize;
    for a in truth.placements() {
        for b in truth.placements() {
            if a.spec == b.spec {
                continue;
            }
            for rel in relations((a.x, a.y), (b.x, b.y)) {
                total += 1;
                if let (Some(pa), Some(pb)) = (pos(predicted, a.spec), pos(predicted, b.spec)) {
                    if relations(pa, pb).contains(&rel) {
                        kept += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        recall
    } else {
        recall * kept as f64 / total as f64
    }
}

/// Corpus BLEU-4, add-one smoothed, written over joined n-gram strings.
pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut clipped, mut count) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let grams = |s: &[String]| {
                let mut m: BTreeMap<String, usize> = BTreeMap::new();
                for i in 0..(s.len() + 1).saturating_sub(n) {
                    *m.entry(s[i..i + n].join(" ")).or_default() += 1;
                }
                m
            };
            let (hg, rg) = (grams(h), grams(r));
            for (g, c) in &hg {
                clipped += (*c).min(*rg.get(g).unwrap_or(&0));
                count += c;
            }
        }
        log_sum += ((clipped as f64 + 1.0) / (count as f64 + 1.0)).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
