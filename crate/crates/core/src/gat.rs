//! GATv2 attention over an explicit neighbor graph.
//!
//! For node `i` with neighbors `N(i)`:
//!
//! ```text
//! e_ij  = aᵀ LeakyReLU(W_a [h_i || h_j])
//! α_ij  = softmax_j(e_ij)            over j in N(i)
//! h'_i  = σ(Σ_j α_ij W_v h_j)        σ = LeakyReLU
//! ```
//!
//! Because the nonlinearity sits between `W_a` and `a`, the ranking of
//! `e_ij` over a fixed key set can change with the query node ("dynamic"
//! attention), unlike the original GAT scoring.
//!
//! The layer works on batches `(batch, nodes, features)` and computes the
//! scores densely; entries outside `N(i)` are masked out of the softmax.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::layers::{uniform_init, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Node count plus the ordered neighbor set of every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let num_nodes = neighbors.len();
        if num_nodes == 0 {
            return Err(invalid("graph", "a graph needs at least one node"));
        }
        for (i, list) in neighbors.iter().enumerate() {
            if list.is_empty() {
                return Err(invalid("graph", format!("node {i} has no neighbors")));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= num_nodes) {
                return Err(invalid(
                    "graph",
                    format!("node {i} lists neighbor {j}, but there are only {num_nodes} nodes"),
                ));
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(invalid("graph", format!("node {i} lists a neighbor twice")));
            }
        }
        Ok(Self {
            num_nodes,
            neighbors,
        })
    }

    /// Every node is a neighbor of every other node, and of itself when
    /// `self_loops` is set.
    pub fn complete(n: usize, self_loops: bool) -> Result<Self> {
        if n == 0 {
            return Err(invalid("complete_graph", "n must be at least 1"));
        }
        if n == 1 && !self_loops {
            return Err(invalid(
                "complete_graph",
                "a single node without a self-loop has no neighbors",
            ));
        }
        Self::new(
            (0..n)
                .map(|i| (0..n).filter(|&j| self_loops || j != i).collect())
                .collect(),
        )
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// Row-major `nodes x nodes` adjacency mask.
    pub fn mask(&self) -> Vec<bool> {
        let n = self.num_nodes;
        let mut mask = vec![false; n * n];
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                mask[i * n + j] = true;
            }
        }
        mask
    }
}

/// Single-head GATv2 layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gatv2Layer {
    /// Attention transform `(attn_dim x 2 in_dim)` applied to `[h_i || h_j]`.
    pub w_attn: ParamId,
    /// Attention vector `(attn_dim)`.
    pub attn: ParamId,
    /// Value transform `(out_dim x in_dim)`.
    pub w_value: ParamId,
    pub in_dim: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
    pub leaky_slope: f64,
}

impl Gatv2Layer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        attn_dim: usize,
        out_dim: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let w_attn = uniform_init(rng, &[attn_dim, 2 * in_dim], 2 * in_dim);
        let attn = uniform_init(rng, &[attn_dim], attn_dim);
        let w_value = uniform_init(rng, &[out_dim, in_dim], in_dim);
        Self {
            w_attn: store.add(format!("{name}.w_attn"), w_attn),
            attn: store.add(format!("{name}.attn"), attn),
            w_value: store.add(format!("{name}.w_value"), w_value),
            in_dim,
            attn_dim,
            out_dim,
            leaky_slope,
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        w_attn: Tensor,
        attn: Tensor,
        w_value: Tensor,
        leaky_slope: f64,
    ) -> Result<Self> {
        if w_attn.rank() != 2 || w_attn.shape()[1] % 2 != 0 {
            return Err(invalid("gatv2", "attention transform must be (attn_dim x 2 in_dim)"));
        }
        let (attn_dim, in_dim) = (w_attn.shape()[0], w_attn.shape()[1] / 2);
        if attn.shape() != [attn_dim] {
            return Err(Error::ShapeMismatch {
                op: "gatv2",
                lhs: w_attn.shape().to_vec(),
                rhs: attn.shape().to_vec(),
            });
        }
        if w_value.rank() != 2 || w_value.shape()[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "gatv2",
                lhs: w_attn.shape().to_vec(),
                rhs: w_value.shape().to_vec(),
            });
        }
        let out_dim = w_value.shape()[0];
        Ok(Self {
            w_attn: store.add(format!("{name}.w_attn"), w_attn),
            attn: store.add(format!("{name}.attn"), attn),
            w_value: store.add(format!("{name}.w_value"), w_value),
            in_dim,
            attn_dim,
            out_dim,
            leaky_slope,
        })
    }

    pub fn num_params(&self) -> usize {
        self.attn_dim * (2 * self.in_dim + 1) + self.out_dim * self.in_dim
    }

    /// Accepts `(nodes, d)` or `(batch, nodes, d)`; returns the batched view.
    fn batched(&self, tape: &mut Tape, h: Var, graph: &Graph) -> Result<(Var, usize)> {
        let shape = tape.shape(h).to_vec();
        let (batch, nodes, dim) = match shape[..] {
            [n, d] => (1, n, d),
            [b, n, d] => (b, n, d),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "gatv2",
                    lhs: shape,
                    rhs: vec![graph.num_nodes(), self.in_dim],
                })
            }
        };
        if nodes != graph.num_nodes() || dim != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "gatv2",
                lhs: shape,
                rhs: vec![graph.num_nodes(), self.in_dim],
            });
        }
        let h = if shape.len() == 2 {
            tape.reshape(h, &[1, nodes, dim])?
        } else {
            h
        };
        Ok((h, batch))
    }

    /// Unnormalized scores `e_ij` as a dense `(batch, nodes, nodes)` tensor.
    ///
    /// `W_a [h_i || h_j]` is evaluated as `W_left h_i + W_right h_j`, where
    /// the two halves are column slices of `W_a`; this is the same product
    /// computed once per node instead of once per pair.
    pub fn scores(&self, tape: &mut Tape, params: &Bound, h: Var, graph: &Graph) -> Result<Var> {
        let (h, batch) = self.batched(tape, h, graph)?;
        let n = graph.num_nodes();
        let w = params.get(self.w_attn);
        let w_query = tape.slice(w, 1, 0, self.in_dim)?;
        let w_key = tape.slice(w, 1, self.in_dim, self.in_dim)?;
        let query = tape.matmul_nt(h, w_query)?;
        let key = tape.matmul_nt(h, w_key)?;
        let query = tape.reshape(query, &[batch, n, 1, self.attn_dim])?;
        let key = tape.reshape(key, &[batch, 1, n, self.attn_dim])?;
        let pair = tape.add(query, key)?;
        let pair = tape.leaky_relu(pair, self.leaky_slope)?;
        let a = tape.reshape(params.get(self.attn), &[1, self.attn_dim])?;
        let e = tape.matmul_nt(pair, a)?;
        tape.reshape(e, &[batch, n, n])
    }

    /// Attention coefficients: softmax of each node's scores over its
    /// neighbors, zero elsewhere.
    pub fn attention(&self, tape: &mut Tape, scores: Var, graph: &Graph) -> Result<Var> {
        tape.masked_softmax(scores, &graph.mask())
    }

    /// `σ(Σ_j α_ij W_v h_j)` for every node, shaped `(batch, nodes, out_dim)`.
    pub fn aggregate(&self, tape: &mut Tape, params: &Bound, h: Var, alpha: Var, graph: &Graph) -> Result<Var> {
        let (h, _) = self.batched(tape, h, graph)?;
        let values = tape.matmul_nt(h, params.get(self.w_value))?;
        let mixed = tape.matmul(alpha, values)?;
        tape.leaky_relu(mixed, self.leaky_slope)
    }

    /// Full layer; returns the new node features and the attention matrix.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, h: Var, graph: &Graph) -> Result<(Var, Var)> {
        let e = self.scores(tape, params, h, graph)?;
        let alpha = self.attention(tape, e, graph)?;
        let out = self.aggregate(tape, params, h, alpha, graph)?;
        Ok((out, alpha))
    }

    /// Per-node score lists `e_ij`, ordered like `graph.neighbors(i)`, for a
    /// single `(nodes, d)` feature matrix.
    pub fn score_lists(&self, store: &ParamStore, h: &Tensor, graph: &Graph) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let e = self.scores(&mut tape, &params, hv, graph)?;
        Ok(gather_neighbors(tape.value(e).data(), graph))
    }

    /// Per-node attention lists `α_ij`, ordered like `graph.neighbors(i)`.
    pub fn attention_lists(&self, store: &ParamStore, h: &Tensor, graph: &Graph) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let e = self.scores(&mut tape, &params, hv, graph)?;
        let alpha = self.attention(&mut tape, e, graph)?;
        Ok(gather_neighbors(tape.value(alpha).data(), graph))
    }
}

fn gather_neighbors(dense: &[f64], graph: &Graph) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    (0..n)
        .map(|i| graph.neighbors(i).iter().map(|&j| dense[i * n + j]).collect())
        .collect()
}

/// Softmax of every score list on its own.
pub fn neighbor_softmax(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.is_empty() {
                return Err(invalid("gatv2_attention", format!("node {i} has an empty neighbor list")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&e| libm::exp(e - max)).collect();
            let total: f64 = exps.iter().sum();
            Ok(exps.into_iter().map(|e| e / total).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            0.2 * x
        }
    }

    /// Direct evaluation of `aᵀ LeakyReLU(W [h_i || h_j])` with an explicit
    /// concatenation.
    fn direct_score(w: &Tensor, a: &Tensor, hi: &[f64], hj: &[f64]) -> f64 {
        let cat: Vec<f64> = hi.iter().chain(hj).copied().collect();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..rows)
            .map(|r| {
                let z: f64 = (0..cols).map(|c| w.data()[r * cols + c] * cat[c]).sum();
                a.data()[r] * leaky(z)
            })
            .sum()
    }

    fn selector_layer(store: &mut ParamStore, a: &[f64]) -> Gatv2Layer {
        Gatv2Layer::from_tensors(
            store,
            "g",
            t(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            t(&[2], a),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn complete_graph_construction() {
        let g = Graph::complete(3, false).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        let g = Graph::complete(1, true).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        let g = Graph::complete(4, true).unwrap();
        assert!((0..4).all(|i| g.neighbors(i).len() == 4));
        assert!(Graph::complete(1, false).is_err());
    }

    #[test]
    fn graph_validation() {
        assert!(Graph::new(vec![vec![1], vec![]]).is_err());
        assert!(Graph::new(vec![vec![2], vec![0]]).is_err());
        assert!(Graph::new(vec![vec![0, 0]]).is_err());
    }

    #[test]
    fn selector_scores_match_direct_evaluation() {
        let mut store = ParamStore::new();
        let layer = selector_layer(&mut store, &[1.0, 1.0]);
        let h = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let graph = Graph::complete(2, true).unwrap();
        let e = layer.score_lists(&store, &h, &graph).unwrap();
        // node 0 = [1, 0] attending to node 1 = [0, 1]
        assert_eq!(e[0][1], 2.0);
        let w = store.get(layer.w_attn).clone();
        let a = store.get(layer.attn).clone();
        for i in 0..2 {
            for (k, &j) in graph.neighbors(i).iter().enumerate() {
                let hi = &h.data()[i * 2..i * 2 + 2];
                let hj = &h.data()[j * 2..j * 2 + 2];
                assert!((e[i][k] - direct_score(&w, &a, hi, hj)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_scores_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = Gatv2Layer::new(&mut store, "g", 3, 5, 4, 0.2, &mut rng);
        let h = uniform_init(&mut rng, &[4, 3], 1);
        let graph = Graph::complete(4, true).unwrap();
        let e = layer.score_lists(&store, &h, &graph).unwrap();
        let w = store.get(layer.w_attn);
        let a = store.get(layer.attn);
        for i in 0..4 {
            for (k, &j) in graph.neighbors(i).iter().enumerate() {
                let d = direct_score(w, a, &h.data()[i * 3..i * 3 + 3], &h.data()[j * 3..j * 3 + 3]);
                assert!((e[i][k] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_attention_vector_gives_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let w = uniform_init(&mut rng, &[3, 4], 1);
        let layer = Gatv2Layer::from_tensors(&mut store, "g", w, Tensor::zeros(&[3]), Tensor::ones(&[2, 2]), 0.2).unwrap();
        let h = uniform_init(&mut rng, &[3, 2], 1);
        let e = layer.score_lists(&store, &h, &Graph::complete(3, true).unwrap()).unwrap();
        assert!(e.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_score_lists() {
        let alpha = neighbor_softmax(&[vec![0.0, 0.0, 0.0], vec![libm::log(2.0), 0.0]]).unwrap();
        for v in &alpha[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((alpha[1][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((alpha[1][1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(neighbor_softmax(&[vec![]]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let e = vec![vec![0.3, -1.2, 2.0, 0.5]];
        let shifted = vec![e[0].iter().map(|v| v + 17.5).collect::<Vec<_>>()];
        let a = neighbor_softmax(&e).unwrap();
        let b = neighbor_softmax(&shifted).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_averages_neighbor_values() {
        let mut store = ParamStore::new();
        let layer = selector_layer(&mut store, &[0.0, 0.0]);
        let graph = Graph::new(vec![vec![1, 2], vec![1], vec![2]]).unwrap();
        let h = t(&[3, 2], &[5.0, 5.0, 2.0, 0.0, 0.0, 2.0]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let hv = tape.constant(h);
        let (out, alpha) = layer.forward(&mut tape, &p, hv, &graph).unwrap();
        let out = tape.value(out).data();
        assert_eq!(&out[0..2], &[1.0, 1.0]);
        // single neighbor: α = 1 and h' = σ(W_v h_j)
        assert_eq!(tape.value(alpha).data()[4], 1.0);
        assert_eq!(&out[2..4], &[2.0, 0.0]);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let layer = Gatv2Layer::new(&mut store, "g", 3, 4, 4, 0.2, &mut rng);
        let graph = Graph::complete(4, true).unwrap();
        assert!(layer.score_lists(&store, &Tensor::ones(&[4, 2]), &graph).is_err());
        assert!(layer.score_lists(&store, &Tensor::ones(&[5, 3]), &graph).is_err());
    }

    #[test]
    fn gradient_through_scores_softmax_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let layer = Gatv2Layer::new(&mut store, "g", 3, 4, 2, 0.2, &mut rng);
        let graph = Graph::new(vec![vec![0, 1, 3], vec![1, 2], vec![0, 1, 2, 3], vec![2]]).unwrap();
        let h = uniform_init(&mut rng, &[2, 4, 3], 1);
        let mut inputs = store.tensors().to_vec();
        inputs.push(h);
        let err = finite_diff_check(
            |tape, vars| {
                let params = Bound::from_vars(vars[..3].to_vec());
                let (out, _) = layer.forward(tape, &params, vars[3], &graph)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
