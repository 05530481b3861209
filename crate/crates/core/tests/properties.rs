mod common;

use std::collections::BTreeMap;

use common::{oracle_prf, oracle_relsim, perturbed_scene, random_scene, random_tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sscr::dataset::{generate_episodes, read_jsonl, write_jsonl};
use sscr::diff::{AdamConfig, Graph, ParameterStore};
use sscr::editor::{generate_image, Editor, EditorConfig};
use sscr::explainer::{ctc_loss, target_ids, Explainer, ExplainerConfig};
use sscr::instructions::{intervene, Instruction, ParsedEdit, Relation, TokenKind, Vocabulary};
use sscr::metrics::{f1, relsim};
use sscr::scene::ObjectSpec;

fn kinds(i: &Instruction) -> BTreeMap<TokenKind, usize> {
    let mut m = BTreeMap::new();
    for k in i.kinds() {
        *m.entry(k).or_default() += 1;
    }
    m
}

fn small_editor() -> EditorConfig {
    EditorConfig {
        embedding: 6,
        instruction_dim: 6,
        history_dim: 6,
        feature_dim: 4,
        generator_hidden: 5,
        discriminator_hidden: 5,
        ..Default::default()
    }
}

fn small_explainer() -> ExplainerConfig {
    ExplainerConfig {
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
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detect_inverts_render(seed in any::<u64>()) {
        let s = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 10);
        prop_assert_eq!(s.render().detect(), s);
    }

    #[test]
    fn apply_edit_adds_exactly_one(seed in any::<u64>(), target in 0..ObjectSpec::COUNT, rel in 0..4usize) {
        let s = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 6);
        let target = ObjectSpec::from_index(target).unwrap();
        let edit = match s.placements().first() {
            Some(a) => ParsedEdit::relative(target, Relation::ANCHORED[rel], a.spec),
            None => Some(ParsedEdit::center(target)),
        };
        if let Some(Ok(next)) = edit.map(|e| s.apply_edit(&e)) {
            prop_assert_eq!(next.len(), s.len() + 1);
            for p in s.placements() {
                prop_assert_eq!(next.find(p.spec), Some(p));
            }
        }
    }

    #[test]
    fn edge_count_formula(seed in any::<u64>()) {
        let s = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 8);
        let mut expected = 0;
        for a in s.placements() {
            for b in s.placements() {
                if a.spec != b.spec {
                    expected += usize::from(a.x != b.x) + usize::from(a.y != b.y);
                }
            }
        }
        prop_assert_eq!(s.scene_graph().edges.len(), expected);
    }

    #[test]
    fn intervention_preserves_types_and_changes_text(ep in 0..50u64, turn in 0..5usize, seed in any::<u64>(), p in 0.0..=1.0f64) {
        let src = &generate_episodes(1, ep)[0].turns[turn].instruction;
        let cf = intervene(src, seed, p);
        prop_assert!(cf.parse().is_ok());
        prop_assert_eq!(kinds(&cf), kinds(src));
        prop_assert_ne!(cf.text(), src.text());
    }

    #[test]
    fn metrics_match_oracle_and_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random_scene(&mut rng, 6);
        let pred = perturbed_scene(&truth, &mut rng);
        let prf = f1(&pred, &truth);
        let (p, r, f) = oracle_prf(&pred, &truth);
        prop_assert_eq!((prf.precision, prf.recall, prf.f1), (p, r, f));
        let rs = relsim(&truth.scene_graph(), &pred.scene_graph(), prf.recall);
        prop_assert_eq!(rs, oracle_relsim(&pred, &truth));
        for v in [prf.precision, prf.recall, prf.f1, rs] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(rs <= prf.recall);
    }

    #[test]
    fn relsim_of_graph_with_itself_is_one(seed in any::<u64>()) {
        let s = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 6);
        let g = s.scene_graph();
        if !g.edges.is_empty() {
            prop_assert_eq!(relsim(&g, &g, 1.0), 1.0);
        }
    }

    #[test]
    fn jsonl_round_trip(n in 0..6usize, seed in any::<u64>()) {
        let eps = generate_episodes(n, seed);
        let mut buf = Vec::new();
        write_jsonl(&eps, &mut buf).unwrap();
        prop_assert_eq!(read_jsonl(buf.as_slice()).unwrap(), eps);
    }

    #[test]
    fn generator_output_stays_in_unit_range(seed in any::<u64>(), scale in 0.1..20.0f64) {
        let vocab = Vocabulary::standard();
        let e = Editor::new(small_editor(), &vocab, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_tensor(&[1, 6], scale, &mut rng);
        let prev = random_scene(&mut rng, 5).render();
        let img = generate_image(&e, &prev, h.data()).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn explainer_loss_is_non_negative(seed in any::<u64>()) {
        let vocab = Vocabulary::standard();
        let ex = Explainer::new(small_explainer(), &vocab, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cur = random_tensor(&[2 * 64, 48], 1.0, &mut rng);
        let prev = random_tensor(&[2 * 64, 48], 1.0, &mut rng);
        let h = random_tensor(&[2, 4], 1.0, &mut rng);
        let eps = generate_episodes(2, seed % 1000);
        let targets: Vec<&Instruction> = eps.iter().map(|e| &e.turns[0].instruction).collect();
        let mut g = Graph::new();
        let p = ex.store.bind(&mut g, false);
        let (c, pv, hv) = (g.constant(cur), g.constant(prev), g.constant(h));
        let l = ctc_loss(&mut g, &p, c, pv, hv, &target_ids(&vocab, &targets).unwrap()).unwrap();
        prop_assert!(g.value(l).item() > 0.0);
    }

    #[test]
    fn frozen_store_never_changes(seed in any::<u64>(), attempts in 1..5usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        s.init_weight("w", 3, 2, &mut rng).unwrap();
        s.freeze();
        let before = s.checksum();
        for _ in 0..attempts {
            prop_assert!(s.adam_step(&AdamConfig::with_lr(0.1)).is_err());
        }
        prop_assert_eq!(s.checksum(), before);
    }

    #[test]
    fn graph_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParameterStore::new();
            s.insert("x", random_tensor(&[3, 4], 2.0, &mut rng)).unwrap();
            let mut g = Graph::new();
            let p = s.bind(&mut g, true);
            let x = p.get("x");
            let y = g.tanh(x);
            let z = g.mul(y, x).unwrap();
            let l = g.sum(z);
            g.backward_into(l, &mut [&mut s]).unwrap();
            (g.value(l).item().to_bits(), s.grad("x").unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
