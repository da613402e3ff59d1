use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, FeatureKind};
use crate::engine::Tensor;
use crate::error::Result;
use crate::graph::{LabeledGraph, SparseGraph};
use crate::scalar::Scalar;

/// Cycle graph on `n ≥ 3` nodes.
pub fn cycle(n: usize) -> Result<SparseGraph> {
    let edges: Vec<_> = (0..n).map(|u| (u, (u + 1) % n)).collect();
    SparseGraph::from_edges(n, &edges)
}

/// Star with node 0 as the center and `n - 1` leaves.
pub fn star(n: usize) -> Result<SparseGraph> {
    let edges: Vec<_> = (1..n).map(|v| (0, v)).collect();
    SparseGraph::from_edges(n, &edges)
}

/// `per_class` cycles (class 0) and `per_class` stars (class 1), interleaved,
/// with node counts drawn from `sizes`. Features are one-hot degrees.
pub fn cycles_and_stars<T: Scalar>(
    per_class: usize,
    sizes: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for label in 0..2 {
            let n = rng.gen_range(sizes.clone()).max(3);
            let g = if label == 0 { cycle(n)? } else { star(n)? };
            graphs.push(LabeledGraph::new(g, Tensor::zeros(n, 1), label)?);
        }
    }
    let mut ds = Dataset {
        name: "CYCLESTAR".into(),
        graphs,
        num_classes: 2,
        feature_kind: FeatureKind::DegreeOnehot,
        label_values: vec![0, 1],
        node_label_values: Vec::new(),
        max_degree: None,
    };
    let all: Vec<usize> = (0..ds.len()).collect();
    let bound = ds.degree_bound(&all);
    ds.set_degree_features(bound)?;
    Ok(ds)
}
