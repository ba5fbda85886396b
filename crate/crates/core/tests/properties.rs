//! Property tests over the public API.

use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chainsformer::autodiff::{ParamStore, Tape, Tensor};
use chainsformer::encoder::{decode_value, encode_value, ChainEncoder};
use chainsformer::filter::{init_table, rank_indices, ScoreOrder};
use chainsformer::hyperbolic::{self, PoincareVector};
use chainsformer::kg::{compute_attribute_stats, DatasetSplit, GraphBuilder, KnowledgeGraph, NumericalTriple, Query};
use chainsformer::reasoner::{aggregate, ChainWeighter};
use chainsformer::retrieval::{enumerate_all_chains, sample_tree, RAChain};

// ---------------------------------------------------------------------------
// generators

/// A point strictly inside the unit-curvature ball, scaled to `c`.
fn ball_point(dim: usize, c: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, dim), 0.0f64..0.95).prop_map(move |(v, r)| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n * r / c.sqrt()).collect()
    })
}

/// Random graph over `n` entities with distinct edges, two attributes and a
/// value on roughly half of the entities.
#[derive(Debug, Clone)]
struct GraphCase {
    n: usize,
    edges: Vec<(usize, usize, usize)>,
    values: Vec<(usize, usize, f64)>,
}

fn graph_case(max_nodes: usize) -> impl Strategy<Value = GraphCase> {
    (3..=max_nodes).prop_flat_map(|n| {
        let edges = prop::collection::vec((0..n, 0..3usize, 0..n), n..3 * n);
        let values = prop::collection::vec((0..n, 0..2usize, -50.0f64..50.0), 2..2 * n);
        (Just(n), edges, values).prop_map(|(n, edges, values)| {
            let edges: BTreeSet<_> = edges.into_iter().filter(|(h, _, t)| h != t).collect();
            let mut seen = HashSet::new();
            let values = values.into_iter().filter(|(e, a, _)| seen.insert((*e, *a))).collect();
            GraphCase { n, edges: edges.into_iter().collect(), values }
        })
    })
}

fn build(case: &GraphCase, holdout: usize) -> (KnowledgeGraph, DatasetSplit) {
    let mut b = GraphBuilder::new();
    for e in 0..case.n {
        b.entity(&format!("e{e}"));
    }
    for &(h, r, t) in &case.edges {
        b.add_edge(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    let mut all: Vec<NumericalTriple> =
        case.values.iter().map(|&(e, a, v)| b.numerical(&format!("e{e}"), &format!("a{a}"), v).unwrap()).collect();
    let test = all.split_off(all.len().saturating_sub(holdout));
    let split = DatasetSplit { train: all, valid: Vec::new(), test };
    (b.build(split.train.clone()), split)
}

// ---------------------------------------------------------------------------
// graph store

proptest! {
    #[test]
    fn normalize_round_trips(lo in -1e6f64..1e6, span in 1e-3f64..1e6, t in 0.0f64..=1.0) {
        let hi = lo + span;
        let train = vec![
            NumericalTriple { entity: 0, attribute: 0, value: lo },
            NumericalTriple { entity: 1, attribute: 0, value: hi },
        ];
        let stats = compute_attribute_stats(&train, 1);
        let v = lo + t * span;
        let back = stats.denormalize(stats.normalize(v, 0).unwrap(), 0).unwrap();
        prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn inverse_synthesis_doubles_edges(case in graph_case(12)) {
        let (kg, _) = build(&case, 0);
        prop_assert_eq!(kg.relational_triples().len(), 2 * case.edges.len());
        for t in kg.relational_triples() {
            prop_assert!(kg.has_edge(t.tail, kg.inverse(t.relation), t.head));
        }
    }

    #[test]
    fn held_out_values_are_unreachable(case in graph_case(12), holdout in 1usize..4) {
        let (kg, split) = build(&case, holdout);
        for t in &split.test {
            prop_assert!(!kg.known_values(t.entity).iter().any(|&(a, _)| a == t.attribute));
        }
    }
}

// ---------------------------------------------------------------------------
// retrieval

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_chains_are_enumerated_simple_and_short(case in graph_case(10), seed in any::<u64>(), hops in 1usize..4) {
        let (kg, _) = build(&case, 0);
        let query = Query { entity: 0, attribute: 0, target_value: None };
        let toc = sample_tree(&kg, &query, 64, hops, seed);
        let all = enumerate_all_chains(&kg, &query, hops).unwrap();
        // parallel edges make several relation labels valid for one entity
        // path; chains are identified by path and source attribute
        let key = |c: &RAChain| (c.entity_path.clone(), c.source_attribute);
        let universe: HashSet<_> = all.iter().map(key).collect();
        for c in &toc.chains {
            prop_assert!(universe.contains(&key(c)));
            for (i, &r) in c.relations.iter().enumerate() {
                prop_assert!(kg.has_edge(c.entity_path[i], r, c.entity_path[i + 1]));
            }
            prop_assert!(!c.relations.is_empty() && c.relations.len() <= hops);
            prop_assert_eq!(c.entity_path.len(), c.relations.len() + 1);
            let distinct: HashSet<_> = c.entity_path.iter().collect();
            prop_assert_eq!(distinct.len(), c.entity_path.len());
        }
        prop_assert_eq!(sample_tree(&kg, &query, 64, hops, seed), toc);
    }
}

// ---------------------------------------------------------------------------
// hyperbolic geometry

proptest! {
    #[test]
    fn origin_is_the_identity(x in ball_point(6, 1.0), c in 0.1f64..2.0) {
        let x: Vec<f64> = x.iter().map(|v| v / c.sqrt()).collect();
        let p = PoincareVector::new(x.clone(), c).unwrap();
        let o = PoincareVector::origin(6, c);
        let a = hyperbolic::mobius_add(&o, &p).unwrap();
        let b = hyperbolic::mobius_add(&p, &o).unwrap();
        for i in 0..6 {
            prop_assert!((a.coords()[i] - x[i]).abs() < 1e-12);
            prop_assert!((b.coords()[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_is_a_symmetric_positive_form(x in ball_point(5, 1.0), y in ball_point(5, 1.0)) {
        let p = PoincareVector::new(x, 1.0).unwrap();
        let q = PoincareVector::new(y, 1.0).unwrap();
        let d = hyperbolic::distance(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - hyperbolic::distance(&q, &p).unwrap()).abs() <= 1e-9 * d.max(1.0));
        prop_assert!(hyperbolic::distance(&p, &p).unwrap().abs() < 1e-12);
        if p.coords() != q.coords() {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn operations_stay_inside_the_ball(x in ball_point(4, 1.0), y in ball_point(4, 1.0), raw in prop::collection::vec(-10.0f64..10.0, 4)) {
        let p = PoincareVector::new(x, 1.0).unwrap();
        let q = PoincareVector::new(y, 1.0).unwrap();
        prop_assert!(hyperbolic::mobius_add(&p, &q).unwrap().norm() < 1.0);
        prop_assert!(hyperbolic::project_to_ball(&raw, 1.0, hyperbolic::DEFAULT_MARGIN).unwrap().norm() < 1.0);
    }
}

#[test]
fn mobius_addition_is_not_commutative() {
    let p = PoincareVector::new(vec![0.3, 0.1], 1.0).unwrap();
    let q = PoincareVector::new(vec![-0.2, 0.5], 1.0).unwrap();
    let a = hyperbolic::mobius_add(&p, &q).unwrap();
    let b = hyperbolic::mobius_add(&q, &p).unwrap();
    assert!(a.coords().iter().zip(b.coords()).any(|(u, v)| (u - v).abs() > 1e-6));
}

// ---------------------------------------------------------------------------
// filter selection

fn dummy_chains(n: usize) -> Vec<RAChain> {
    (0..n)
        .map(|i| RAChain {
            source_attribute: i % 3,
            relations: vec![0; 1 + i % 3],
            query_attribute: 0,
            source_value: 0.0,
            entity_path: vec![i; 2 + i % 3],
        })
        .collect()
}

proptest! {
    #[test]
    fn selection_ignores_positive_rescaling(
        scores in prop::collection::vec((0u8..20).prop_map(|v| v as f64 * 0.125), 1..40),
        k in 1usize..20,
        scale in 0.01f64..100.0,
    ) {
        let chains = dummy_chains(scores.len());
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        let a: BTreeSet<_> = rank_indices(&scores, &chains, k, ScoreOrder::Smallest).into_iter().collect();
        let b: BTreeSet<_> = rank_indices(&scaled, &chains, k, ScoreOrder::Smallest).into_iter().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn selected_scores_are_sorted_and_beat_the_rest(scores in prop::collection::vec(0.0f64..5.0, 1..40), k in 1usize..20) {
        let chains = dummy_chains(scores.len());
        let idx = rank_indices(&scores, &chains, k, ScoreOrder::Smallest);
        prop_assert_eq!(idx.len(), k.min(scores.len()));
        prop_assert!(idx.windows(2).all(|w| scores[w[0]] <= scores[w[1]]));
        let kept: HashSet<_> = idx.iter().copied().collect();
        let worst_kept = idx.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        for (i, &s) in scores.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(s >= worst_kept);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// chain encoder

proptest! {
    #[test]
    fn bit_stream_round_trips(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let enc = encode_value(v).unwrap();
        prop_assert!(enc.iter().all(|&b| b == 0.0 || b == 1.0));
        prop_assert_eq!(decode_value(&enc).unwrap().to_bits(), bits);
    }

    #[test]
    fn distinct_values_get_distinct_streams(a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (f64::from_bits(a), f64::from_bits(b));
        prop_assume!(x.is_finite() && y.is_finite() && a != b);
        prop_assert_ne!(encode_value(x).unwrap(), encode_value(y).unwrap());
    }
}

struct EncoderFixture {
    store: ParamStore,
    encoder: ChainEncoder,
    relations: chainsformer::autodiff::ParamId,
    attributes: chainsformer::autodiff::ParamId,
}

fn encoder_fixture(seed: u64) -> EncoderFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let relations = store.add_hyperbolic("r", init_table(5, 6, &mut rng), 1.0);
    let attributes = store.add_hyperbolic("a", init_table(3, 6, &mut rng), 1.0);
    let encoder = ChainEncoder::new(&mut store, 6, 8, 2, 2, 8, 3, &mut rng).unwrap();
    EncoderFixture { store, encoder, relations, attributes }
}

fn random_chains(rng_seed: u64, n: usize) -> Vec<RAChain> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            RAChain {
                source_attribute: rng.gen_range(0..3),
                relations: (0..len).map(|_| rng.gen_range(0..5)).collect(),
                query_attribute: 0,
                source_value: rng.gen_range(-100.0..100.0),
                entity_path: (0..=len).collect(),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoding_width_and_batch_independence(seed in any::<u64>(), n in 1usize..6) {
        let f = encoder_fixture(seed);
        let chains = random_chains(seed ^ 1, n);
        let values: Vec<f64> = chains.iter().map(|c| c.source_value).collect();
        let encode = |chains: &[RAChain], values: &[f64]| {
            let mut tape = Tape::new(&f.store);
            let (r, a) = (tape.param(f.relations), tape.param(f.attributes));
            let tables = f.encoder.tables(&mut tape, r, a, 1.0).unwrap();
            let e = f.encoder.encode(&mut tape, &tables, chains, 0).unwrap();
            let e = f.encoder.affine.transfer(&mut tape, e, values).unwrap();
            tape.value(e).clone()
        };
        let batched = encode(&chains, &values);
        prop_assert_eq!(batched.shape(), [n, 8]);
        for i in 0..n {
            let single = encode(&chains[i..=i], &values[i..=i]);
            for (x, y) in single.row(0).iter().zip(batched.row(i)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// reasoner

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chain_weights_are_a_permutation_equivariant_distribution(
        seed in any::<u64>(),
        n in 1usize..7,
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = ChainWeighter::new(&mut store, 8, 2, 2, 3, &mut rng).unwrap();
        let reps = init_table(n, 8, &mut rng);
        let lengths: Vec<usize> = (0..n).map(|i| 1 + (seed as usize + i) % 3).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));

        let omega = |rows: &[usize]| {
            let mut tape = Tape::new(&store);
            let data: Vec<f64> = rows.iter().flat_map(|&i| reps.row(i).to_vec()).collect();
            let x = tape.constant(Tensor::new(rows.len(), 8, data));
            let lens: Vec<usize> = rows.iter().map(|&i| lengths[i]).collect();
            let o = w.weights(&mut tape, x, &lens, None).unwrap();
            tape.value(o).data().to_vec()
        };
        let base = omega(&(0..n).collect::<Vec<_>>());
        prop_assert!(base.iter().all(|&p| p >= 0.0));
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let permuted = omega(&perm);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((permuted[j] - base[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_is_convex(
        raw in prop::collection::vec(0.0f64..1.0, 1..12),
        preds in prop::collection::vec(-1.0f64..2.0, 12),
    ) {
        let total: f64 = raw.iter().sum::<f64>().max(1e-9);
        let omega: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let preds = &preds[..omega.len()];
        let out = aggregate(&omega, preds).unwrap();
        let lo = preds.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = preds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
    }
}
