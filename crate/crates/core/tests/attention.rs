use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stgat_core::gat::{neighbor_softmax, Gatv2Layer, Graph};
use stgat_core::layers::ParamStore;
use stgat_core::{Tape, Tensor};

const TOL: f64 = 1e-9;

fn random_layer(seed: u64, in_dim: usize, attn_dim: usize, out_dim: usize) -> (ParamStore, Gatv2Layer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Gatv2Layer::new(&mut store, "g", in_dim, attn_dim, out_dim, 0.2, &mut rng);
    (store, layer)
}

fn forward(store: &ParamStore, layer: &Gatv2Layer, h: &Tensor, graph: &Graph) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let (out, alpha) = layer.forward(&mut tape, &params, hv, graph).unwrap();
    (tape.value(out).clone(), tape.value(alpha).clone())
}

fn features(values: Vec<f64>, nodes: usize, dim: usize) -> Tensor {
    Tensor::new(vec![nodes, dim], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(
        seed in 0u64..1000,
        values in proptest::collection::vec(-3.0f64..3.0, 5 * 3),
    ) {
        let (store, layer) = random_layer(seed, 3, 4, 2);
        let graph = Graph::complete(5, true).unwrap();
        let alpha = layer.attention_lists(&store, &features(values, 5, 3), &graph).unwrap();
        for row in &alpha {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn softmax_ignores_a_common_shift(
        scores in proptest::collection::vec(-20.0f64..20.0, 1..9),
        shift in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = neighbor_softmax(&[scores]).unwrap();
        let b = neighbor_softmax(&[shifted]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            prop_assert!((x - y).abs() < TOL);
        }
    }

    #[test]
    fn tape_softmax_ignores_a_common_shift(
        scores in proptest::collection::vec(-20.0f64..20.0, 6),
        shift in -100.0f64..100.0,
    ) {
        let run = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 3], v).unwrap());
            let y = tape.softmax(x, 1).unwrap();
            tape.value(y).clone()
        };
        let a = run(scores.clone());
        let b = run(scores.iter().map(|s| s + shift).collect());
        prop_assert!(a.max_abs_diff(&b).unwrap() < TOL);
    }

    #[test]
    fn layer_is_permutation_equivariant(
        seed in 0u64..1000,
        values in proptest::collection::vec(-2.0f64..2.0, 5 * 3),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (store, layer) = random_layer(seed, 3, 4, 2);
        let graph = Graph::complete(5, true).unwrap();
        let h = features(values.clone(), 5, 3);
        // Row k of the permuted input is row perm[k] of the original.
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| values[p * 3..p * 3 + 3].to_vec()).collect();
        let (out, alpha) = forward(&store, &layer, &h, &graph);
        let (out_p, alpha_p) = forward(&store, &layer, &features(permuted, 5, 3), &graph);
        for k in 0..5 {
            for c in 0..2 {
                prop_assert!((out_p.at(&[0, k, c]) - out.at(&[0, perm[k], c])).abs() < TOL);
            }
            for l in 0..5 {
                prop_assert!((alpha_p.at(&[0, k, l]) - alpha.at(&[0, perm[k], perm[l]])).abs() < TOL);
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// With `W` rows `[1,0,-1,0]` and `[-1,0,1,0]` and `a = [-1,-1]`, the score
/// of node `i` for node `j` is `-0.8 |x_i - x_j|` on the first feature, so
/// every node ranks itself first: the ranking depends on the query.
#[test]
fn dynamic_attention_witness() {
    let mut store = ParamStore::new();
    let w = Tensor::new(vec![2, 4], vec![1.0, 0.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
    let layer =
        Gatv2Layer::from_tensors(&mut store, "g", w, Tensor::from_vec(vec![-1.0, -1.0]).unwrap(), Tensor::ones(&[1, 2]), 0.2)
            .unwrap();
    let h = features(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0], 3, 2);
    let graph = Graph::complete(3, true).unwrap();
    let scores = layer.score_lists(&store, &h, &graph).unwrap();
    for (i, row) in scores.iter().enumerate() {
        for (k, &j) in graph.neighbors(i).iter().enumerate() {
            let d = (i as f64 - j as f64).abs();
            assert!((row[k] + 0.8 * d).abs() < 1e-15);
        }
    }
    let tops: Vec<usize> = scores
        .iter()
        .enumerate()
        .map(|(i, row)| graph.neighbors(i)[argmax(row)])
        .collect();
    assert_eq!(tops, [0, 1, 2]);

    // A static score a1·g(h_i) + a2·g(h_j) ranks keys identically for every
    // query; for nodes 0 and 1 the constructed example cannot be expressed
    // that way because their preferred keys differ.
    assert_ne!(tops[0], tops[1]);
}
