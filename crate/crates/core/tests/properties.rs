#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;

use foke_core::embedding::{format_significant, gnn_forward, Activation, EmbeddingTable, GnnLayerParams, Pooling};
use foke_core::linalg::{softmax, Matrix};
use foke_core::profile::{FusionWeights, ProfileVectors};
use foke_core::prompt::{retrieve_task_subforest, SlottedText, TaskSpec};
use foke_core::{
    attention_fuse, recommend_next, retrieve_tree, simulate_learner, update_mastery, Concept, ConceptId,
    KnowledgeForest, KnowledgeTree, MasteryState, Relation, RelationKind, SimConfig, TreeRelationMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random forest: tree `k` has `sizes[k]` concepts `k.i`, each non-root
/// concept hangs off an earlier one, plus a few prerequisite edges.
fn forest(seed: u64, sizes: &[usize]) -> KnowledgeForest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trees = sizes.iter().enumerate().map(|(k, &n)| {
        let id = |i: usize| format!("c{k}.{i}");
        let concepts = (0..n)
            .map(|i| Concept::new(id(i), format!("concept {k}.{i}")))
            .collect();
        let mut relations: Vec<Relation> = (1..n)
            .map(|i| Relation::hierarchy(id(rng.gen_range(0..i)), id(i)))
            .collect();
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for _ in 0..n / 2 {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b && seen.insert((a, b)) {
                relations.push(Relation::new(id(a), id(b), RelationKind::Prerequisite));
            }
        }
        KnowledgeTree::new(format!("t{k}"), id(0), concepts, relations).unwrap()
    });
    KnowledgeForest::from_trees(trees).unwrap()
}

fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn table(seed: u64, forest: &KnowledgeForest, d: usize) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut t = EmbeddingTable::new(d);
    for c in forest.concepts() {
        t.set_concept(c.id.clone(), random_vector(&mut rng, d)).unwrap();
    }
    t.refresh_tree_vectors(forest, Pooling::Mean);
    t
}

fn sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..7, 1..6)
}

proptest! {
    #[test]
    fn local_inference_is_idempotent(seed in any::<u64>(), sizes in sizes(), tau in -1.0f64..1.0) {
        let mut f = forest(seed, &sizes);
        let t = table(seed, &f, 4);
        let first = f.infer_all_relations(&t, tau).unwrap();
        let after_first = f.clone();
        let second = f.infer_all_relations(&t, tau).unwrap();
        prop_assert_eq!(second.added, 0);
        prop_assert_eq!(first.comparisons, second.comparisons);
        prop_assert_eq!(f.pair_comparison_count(), 2 * f.local_pair_count());
        prop_assert_eq!(f.trees(), after_first.trees());
    }

    #[test]
    fn insert_then_remove_is_identity(seed in any::<u64>(), sizes in sizes()) {
        let mut f = forest(seed, &sizes);
        let before = f.clone();
        let extra = KnowledgeTree::new("extra", "x0", vec![Concept::new("x0", "x")], vec![]).unwrap();
        f.insert_tree(extra).unwrap();
        f.remove_tree(&"extra".into()).unwrap();
        prop_assert_eq!(f, before);
    }

    #[test]
    fn retrieval_ignores_query_scale(seed in any::<u64>(), sizes in sizes(), scale in 1e-3f64..1e3) {
        let f = forest(seed, &sizes);
        let t = table(seed, &f, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_vector(&mut rng, 5);
        let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
        let a = retrieve_tree(&q, &t, &f).unwrap();
        let b = retrieve_tree(&scaled, &t, &f).unwrap();
        prop_assert_eq!(a.index, b.index);
        prop_assert!((a.similarity - b.similarity).abs() < 1e-12);
    }

    #[test]
    fn recommendation_is_the_eligible_argmax(
        links in prop::collection::vec(any::<bool>(), 0..45),
        s in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], 1..10),
    ) {
        let k = s.len();
        let mut rows = vec![vec![0u8; k]; k];
        let mut it = links.into_iter().chain(std::iter::repeat(false));
        for i in 0..k {
            rows[i][i] = 1;
            for j in i + 1..k {
                let l = u8::from(it.next().unwrap());
                rows[i][j] = l;
                rows[j][i] = l;
            }
        }
        let m = TreeRelationMatrix::from_rows(rows, 0.5).unwrap();
        let rec = recommend_next(&m, &MasteryState::new(s.clone()).unwrap()).unwrap();
        match rec.next {
            None => prop_assert!(s.iter().all(|&x| x == 1.0)),
            Some(c) => {
                prop_assert!(s[c] < 1.0);
                for (t, sc) in rec.scores.iter().enumerate() {
                    if s[t] < 1.0 {
                        prop_assert!(sc.score <= rec.scores[c].score);
                        if sc.score == rec.scores[c].score {
                            prop_assert!(c <= t);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_ignores_uniform_shifts(z in prop::collection::vec(-30.0f64..30.0, 1..6), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_a_convex_combination(seed in any::<u64>(), d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || random_vector(&mut rng, d);
        let vectors = ProfileVectors { attributes: v(), behaviors: v(), trajectory: v() };
        let weights = FusionWeights { w_a: v(), w_b: v(), w_t: v() };
        let f = attention_fuse(&vectors, &weights).unwrap();
        prop_assert!((f.alpha_a + f.alpha_b + f.alpha_t - 1.0).abs() < 1e-12);
        for i in 0..d {
            let parts = [vectors.attributes[i], vectors.behaviors[i], vectors.trajectory[i]];
            let lo = parts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = parts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.embedding[i] >= lo - 1e-12 && f.embedding[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn subforest_grows_with_radius(seed in any::<u64>(), sizes in sizes(), radius in 0usize..4) {
        let f = forest(seed, &sizes);
        let focus: ConceptId = format!("c0.{}", seed as usize % sizes[0]).into();
        let task = |hop_radius| TaskSpec {
            task_id: "t".into(),
            focus_concepts: vec![focus.clone()],
            problem_type: "p".into(),
            hop_radius,
            text: Default::default(),
        };
        let small = retrieve_task_subforest(&f, &task(radius)).unwrap().ids();
        let large = retrieve_task_subforest(&f, &task(radius + 1)).unwrap().ids();
        prop_assert!(small.is_subset(&large));
        prop_assert!(small.contains(&focus));
    }

    #[test]
    fn simulation_progresses(k in 1usize..8, delta in 0.05f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = MasteryState::new((0..k).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        let config = SimConfig { delta, max_steps: 1000, mastery_goal: 1.0, seed };
        let traj = simulate_learner(&TreeRelationMatrix::complete(k), &s0, &config).unwrap();
        let mut total = s0.total();
        for step in &traj {
            prop_assert!(step.mastery.total() >= total);
            total = step.mastery.total();
        }
        prop_assert!(traj.len() <= k * (1.0 / delta).ceil() as usize);
        prop_assert!(traj.last().map_or(s0.all_at_least(1.0), |s| s.mastery.all_at_least(1.0)));
    }

    #[test]
    fn mastery_stays_in_range(s in 0.0f64..=1.0, delta in 0.0f64..=1.0) {
        let next = update_mastery(&MasteryState::new(vec![s]).unwrap(), 0, delta).unwrap();
        prop_assert!(next.values()[0] >= s && next.values()[0] <= 1.0);
    }

    #[test]
    fn gnn_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..7, layers in 1usize..3) {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<Vec<f64>> = (0..n).map(|_| random_vector(&mut rng, d)).collect();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.5) {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        let rows = |rng: &mut ChaCha8Rng| Matrix::from_rows(&(0..d).map(|_| random_vector(rng, d)).collect::<Vec<_>>()).unwrap();
        let params = GnnLayerParams {
            self_weight: rows(&mut rng),
            msg_weight: rows(&mut rng),
            bias: random_vector(&mut rng, d),
            activation: Activation::Tanh,
        };
        let perm: Vec<usize> = (0..n).rev().collect();
        let p_nodes: Vec<Vec<f64>> = perm.iter().map(|&i| nodes[i].clone()).collect();
        let inverse = |i: usize| perm.iter().position(|&p| p == i).unwrap();
        let p_adj: Vec<Vec<usize>> = perm.iter().map(|&i| adjacency[i].iter().map(|&j| inverse(j)).collect()).collect();

        let (h, _) = gnn_forward(&params, layers, &nodes, &adjacency);
        let (ph, _) = gnn_forward(&params, layers, &p_nodes, &p_adj);
        for (pi, &i) in perm.iter().enumerate() {
            for (a, b) in ph[pi].iter().zip(&h[i]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slotted_text_round_trips(parts in prop::collection::vec(prop_oneof![
        "[a-z ]{0,6}".prop_map(|s| s),
        "[A-Z][a-z]{0,4}".prop_map(|s| format!("[{s}]")),
        Just("[[".to_string()),
        Just("]]".to_string()),
    ], 0..8)) {
        let src: String = parts.concat();
        let parsed = SlottedText::parse(&src).unwrap();
        let again = SlottedText::parse(&parsed.to_source()).unwrap();
        prop_assert_eq!(&again, &parsed);
        prop_assert_eq!(again.to_source(), parsed.to_source());
    }

    #[test]
    fn significant_digits_round_trip(x in -1e12f64..1e12) {
        let s = format_significant(x, 6);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-6 * x.abs().max(f64::MIN_POSITIVE));
    }
}
