use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SparseGraph;
use crate::error::{Error, Result};

/// Uniform `G(n, m)`: exactly `m` distinct undirected edges drawn without
/// replacement from all `n(n-1)/2` node pairs. Deterministic per seed.
pub fn erdos_renyi(n: usize, m: usize, seed: u64) -> Result<SparseGraph> {
    let pairs = n
        .checked_mul(n.saturating_sub(1))
        .map(|p| p / 2)
        .ok_or_else(|| Error::Invalid(format!("erdos_renyi: n={n} too large")))?;
    if m > pairs {
        return Err(Error::Invalid(format!(
            "erdos_renyi: m={m} exceeds the {pairs} possible edges on {n} nodes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = index::sample(&mut rng, pairs, m)
        .into_iter()
        .map(pair_from_index)
        .collect();
    SparseGraph::from_edges(n, &edges)
}

/// Inverse of `k = v(v-1)/2 + u` for `u < v`.
fn pair_from_index(k: usize) -> (usize, usize) {
    let mut v = ((1.0 + (1.0 + 8.0 * k as f64).sqrt()) / 2.0) as usize;
    while v * (v - 1) / 2 > k {
        v -= 1;
    }
    while (v + 1) * v / 2 <= k {
        v += 1;
    }
    (k - v * (v - 1) / 2, v)
}
