#![allow(dead_code)]

use graphpool::graph::LabeledGraph;
use graphpool::{SparseGraph, Tensor64};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SparseGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    SparseGraph::from_edges(n, &edges).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor64 {
    let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor64::from_vec(rows, cols, v).unwrap()
}

pub fn random_labeled(
    rng: &mut ChaCha8Rng,
    n: usize,
    f: usize,
    classes: usize,
) -> LabeledGraph<f64> {
    let g = random_graph(rng, n, 0.3);
    let x = random_tensor(rng, n, f);
    LabeledGraph::new(g, x, rng.gen_range(0..classes)).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Row `u` of `x` moves to row `perm[u]`.
pub fn permute_rows(x: &Tensor64, perm: &[usize]) -> Tensor64 {
    let mut out = Tensor64::zeros(x.rows(), x.cols());
    for (u, &pu) in perm.iter().enumerate() {
        out.row_mut(pu).copy_from_slice(x.row(u));
    }
    out
}

pub fn dense_adjacency(g: &SparseGraph) -> Vec<Vec<bool>> {
    let n = g.num_nodes();
    let mut a = vec![vec![false; n]; n];
    for (u, v) in g.edges() {
        a[u][v] = true;
        a[v][u] = true;
    }
    a
}
