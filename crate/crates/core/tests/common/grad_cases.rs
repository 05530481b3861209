//! Gradient checks of every tape primitive and every composite block
//! against central finite differences.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sscr::diff::nn::{self, attention, conv3x3, gru_step, leaky_relu, masked_gru_step, tile_rows};
use sscr::diff::{Bound, Graph, ParameterStore, Tensor, Var};
use sscr::editor::{discriminate, generate, init_discriminator, init_generator, EditorConfig};
use sscr::encoder::{self, encode_instructions, grid_index, history_step, init_text_encoder, TextDims};
use sscr::explainer::{ctc_loss, target_ids, Explainer, ExplainerConfig, TEXT};
use sscr::instructions::{parse, synthesize, Vocabulary};
use sscr::scene::{CELLS, PATCH};

use super::{gradcheck, random_tensor, GradReport};

const PROBES: usize = 100;

fn store_of(inputs: &[(&str, &[usize], f64)], seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    for (name, shape, scale) in inputs {
        s.insert(*name, random_tensor(shape, *scale, &mut rng)).unwrap();
    }
    s
}

thread_local! {
    static RESULTS: std::cell::RefCell<Vec<(String, GradReport)>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn check(name: &str, store: &mut ParameterStore, seed: u64, build: impl Fn(&mut Graph, &Bound) -> Var) {
    let r = gradcheck(store, PROBES, seed, build);
    RESULTS.with(|v| v.borrow_mut().push((name.to_string(), r)));
}

/// Runs every primitive and composite-block check; one report per case.
pub fn run_all() -> Vec<(String, GradReport)> {
    RESULTS.with(|v| v.borrow_mut().clear());
    matmul_family();
    elementwise();
    broadcasting_and_layout();
    losses();
    recurrent_and_attention_blocks();
    instruction_and_history_encoder();
    generator_block();
    discriminator_block();
    explainer_decoder_block();
    RESULTS.with(|v| v.borrow_mut().drain(..).collect())
}

fn matmul_family() {
    let mut s = store_of(&[("a", &[3, 4], 1.0), ("b", &[4, 5], 1.0)], 1);
    check("matmul", &mut s, 1, |g, p| g.matmul(p.get("a"), p.get("b")).unwrap());
    let mut s = store_of(&[("a", &[2, 3, 4], 1.0), ("b", &[2, 4, 5], 1.0)], 2);
    check("batch_matmul", &mut s, 2, |g, p| g.batch_matmul(p.get("a"), p.get("b"), false).unwrap());
    let mut s = store_of(&[("a", &[2, 3, 4], 1.0), ("b", &[2, 5, 4], 1.0)], 3);
    check("batch_matmul^T", &mut s, 3, |g, p| g.batch_matmul(p.get("a"), p.get("b"), true).unwrap());
}

fn elementwise() {
    let mut s = store_of(&[("a", &[4, 6], 2.0), ("b", &[4, 6], 2.0)], 4);
    check("add", &mut s, 4, |g, p| g.add(p.get("a"), p.get("b")).unwrap());
    check("sub", &mut s, 5, |g, p| g.sub(p.get("a"), p.get("b")).unwrap());
    check("mul", &mut s, 6, |g, p| g.mul(p.get("a"), p.get("b")).unwrap());
    check("affine", &mut s, 7, |g, p| g.affine(p.get("a"), -1.7, 0.3));
    check("tanh", &mut s, 8, |g, p| g.tanh(p.get("a")));
    check("sigmoid", &mut s, 9, |g, p| g.sigmoid(p.get("a")));
    check("relu", &mut s, 10, |g, p| g.relu(p.get("a")));
    check("leaky_relu", &mut s, 33, |g, p| leaky_relu(g, p.get("a"), 0.2).unwrap());
    check("softmax", &mut s, 11, |g, p| g.softmax(p.get("a")));
    check("sum", &mut s, 12, |g, p| g.sum(p.get("a")));
    check("mean", &mut s, 13, |g, p| g.mean(p.get("a")));
}

fn broadcasting_and_layout() {
    let mut s = store_of(&[("x", &[6, 4], 1.0), ("b", &[4], 1.0), ("r", &[6], 1.0), ("y", &[6, 3], 1.0)], 14);
    check("add_bias", &mut s, 14, |g, p| g.add_bias(p.get("x"), p.get("b")).unwrap());
    check("scale_rows", &mut s, 15, |g, p| g.scale_rows(p.get("x"), p.get("r")).unwrap());
    check("concat", &mut s, 16, |g, p| g.concat(&[p.get("x"), p.get("y")]).unwrap());
    check("slice", &mut s, 17, |g, p| g.slice(p.get("x"), 1, 3).unwrap());
    check("reshape", &mut s, 18, |g, p| g.reshape(p.get("x"), &[3, 8]).unwrap());
    check("sum_groups", &mut s, 19, |g, p| g.sum_groups(p.get("x"), 3).unwrap());
    let index: Arc<[Option<usize>]> = vec![Some(2), None, Some(0), Some(2), Some(5)].into();
    check("gather_rows", &mut s, 20, move |g, p| g.gather_rows(p.get("x"), index.clone()).unwrap());
    check("tile_rows", &mut s, 21, |g, p| tile_rows(g, p.get("y"), 3).unwrap());
}

fn losses() {
    let mut s = store_of(&[("z", &[5, 7], 3.0)], 22);
    let targets: Arc<[Option<usize>]> = vec![Some(0), Some(6), None, Some(3), Some(3)].into();
    check("cross_entropy", &mut s, 22, move |g, p| g.cross_entropy(p.get("z"), targets.clone()).unwrap());
    let mut s = store_of(&[("z", &[6, 1], 4.0)], 23);
    let y: Arc<[f64]> = vec![1.0, 0.0, 0.3, 1.0, 0.0, 0.5].into();
    check("bce_with_logits", &mut s, 23, move |g, p| g.bce_with_logits(p.get("z"), y.clone()).unwrap());
}

fn recurrent_and_attention_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut s = store_of(&[("x", &[3, 5], 1.0), ("h", &[3, 4], 1.0), ("m", &[3], 1.0)], 24);
    nn::init_gru(&mut s, "cell", 5, 4, &mut rng).unwrap();
    for n in ["cell.bx", "cell.bh"] {
        let fresh = random_tensor(&[12], 0.5, &mut rng);
        s.get_mut(n).unwrap().data_mut().copy_from_slice(fresh.data());
    }
    check("gru_step", &mut s, 24, |g, p| gru_step(g, p, "cell", p.get("x"), p.get("h")).unwrap());
    check("masked_gru_step", &mut s, 25, |g, p| {
        masked_gru_step(g, p, "cell", p.get("x"), p.get("h"), p.get("m")).unwrap()
    });
    let mut s = store_of(&[("q", &[2, 3, 4], 1.0), ("k", &[2, 5, 4], 1.0), ("v", &[2, 5, 4], 1.0)], 26);
    check("attention", &mut s, 26, |g, p| attention(g, p.get("q"), p.get("k"), p.get("v")).unwrap());
    let mut s = store_of(&[("x", &[2 * CELLS, 3], 1.0), ("c.w", &[27, 2], 0.5), ("c.b", &[2], 0.5)], 27);
    let index = grid_index(2);
    check("conv3x3", &mut s, 27, move |g, p| conv3x3(g, p, "c", p.get("x"), &index).unwrap());
}

fn small_editor() -> EditorConfig {
    EditorConfig {
        embedding: 6,
        instruction_dim: 6,
        history_dim: 5,
        feature_dim: 4,
        generator_hidden: 4,
        discriminator_hidden: 4,
        mask_bias: 0.0,
        ..Default::default()
    }
}

/// Biases start at zero; randomize them so their gradients are exercised away
/// from the symmetric point.
fn randomize_biases(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b") || n.ends_with(".bx") || n.ends_with(".bh")).map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let fresh = random_tensor(t.shape(), 0.3, rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

fn instruction_and_history_encoder() {
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let mut s = store_of(&[("h0", &[2, 5], 1.0)], 28);
    let dims = TextDims {
        vocab: vocab.len(),
        embedding: 6,
        instruction: 6,
        history: 5,
    };
    init_text_encoder(&mut s, "t", dims, &mut rng).unwrap();
    randomize_biases(&mut s, &mut rng);
    let a = parse("add a red cube at the center").unwrap();
    let b = parse("add a blue sphere behind the red cube").unwrap();
    let ids = encoder::token_ids(&vocab, &[&synthesize(&a), &synthesize(&b)]).unwrap();
    check("history cell", &mut s, 28, move |g, p| {
        let d = encode_instructions(g, p, "t", &ids).unwrap();
        history_step(g, p, "t", d, p.get("h0")).unwrap()
    });
}

fn image_inputs(store: &mut ParameterStore, names: &[&str], rng: &mut ChaCha8Rng) {
    for n in names {
        let t = random_tensor(&[2 * CELLS, PATCH], 0.5, rng);
        let shifted: Vec<f64> = t.data().iter().map(|v| v + 0.5).collect();
        store.insert(*n, Tensor::new(&[2 * CELLS, PATCH], shifted).unwrap()).unwrap();
    }
}

fn generator_block() {
    let cfg = small_editor();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut s = init_generator(&cfg, &mut rng).unwrap();
    randomize_biases(&mut s, &mut rng);
    image_inputs(&mut s, &["prev"], &mut rng);
    s.insert("h", random_tensor(&[2, 5], 1.0, &mut rng)).unwrap();
    let index = grid_index(2);
    check("generator", &mut s, 29, move |g, p| generate(g, p, p.get("prev"), p.get("h"), &index).unwrap());
}

fn discriminator_block() {
    let cfg = small_editor();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut s = init_discriminator(&cfg, &mut rng).unwrap();
    randomize_biases(&mut s, &mut rng);
    image_inputs(&mut s, &["img"], &mut rng);
    s.insert("h", random_tensor(&[2, 5], 1.0, &mut rng)).unwrap();
    let index = grid_index(2);
    check("discriminator", &mut s, 30, move |g, p| {
        let j = discriminate(g, p, p.get("img"), p.get("h"), &index).unwrap();
        let a = g.sum(j.logit);
        let b = g.sum(j.objects);
        let b = g.affine(b, 0.37, 0.0);
        g.add(a, b).unwrap()
    });
}

fn explainer_decoder_block() {
    let vocab = Vocabulary::standard();
    let cfg = ExplainerConfig {
        embedding: 4,
        instruction_dim: 4,
        history_dim: 5,
        feature_dim: 4,
        memory_dim: 4,
        decoder_hidden: 5,
        token_embedding: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut s = Explainer::new(cfg, &vocab, 31).unwrap().store;
    randomize_biases(&mut s, &mut rng);
    image_inputs(&mut s, &["cur", "prev"], &mut rng);
    s.insert("h", random_tensor(&[2, 5], 1.0, &mut rng)).unwrap();
    let a = synthesize(&parse("add a gray cylinder at the center").unwrap());
    let b = synthesize(&parse("add a yellow cube on the left of the cyan sphere").unwrap());
    let targets = target_ids(&vocab, &[&a, &b]).unwrap();
    assert!(s.names().any(|n| n.starts_with(TEXT)));
    check("explainer decoder", &mut s, 31, move |g, p| {
        ctc_loss(g, p, p.get("cur"), p.get("prev"), p.get("h"), &targets).unwrap()
    });
}
