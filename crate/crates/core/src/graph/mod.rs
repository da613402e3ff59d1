//! Sparse undirected graphs in CSR form, node featurization, random graph
//! generation, induced-subgraph slicing and block-diagonal batching.

mod batch;
mod generate;

pub(crate) use batch::offsets_from_counts;
pub use batch::{batch_graphs, GraphBatch, LabeledGraph};
pub use generate::erdos_renyi;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `N x F` node feature matrix.
pub type NodeFeatures<T> = Tensor<T>;

/// Adjacency of an undirected, unweighted graph. Each edge is stored in both
/// directions; self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseGraph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl SparseGraph {
    /// Graph with `num_nodes` nodes and no edges.
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            row_offsets: vec![0; num_nodes + 1],
            col_indices: Vec::new(),
        }
    }

    /// Builds a graph from an undirected edge list. Either orientation may be
    /// given (or both); duplicates collapse. Self-loops are rejected.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Graph(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop at node {u}")));
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::with_capacity(edges.len() * 2);
        row_offsets.push(0);
        for mut row in adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend(row);
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            num_nodes,
            row_offsets,
            col_indices,
        })
    }

    /// Wraps raw CSR arrays after checking every structural invariant.
    pub fn from_csr(
        num_nodes: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Self> {
        let g = Self {
            num_nodes,
            row_offsets,
            col_indices,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks CSR shape, sorted unique rows, no self-loops and symmetry.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.row_offsets.len() != n + 1 || self.row_offsets[0] != 0 {
            return Err(Error::Graph(
                "row_offsets must have N+1 entries starting at 0".into(),
            ));
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len() {
            return Err(Error::Graph(
                "row_offsets must end at col_indices length".into(),
            ));
        }
        for u in 0..n {
            let (lo, hi) = (self.row_offsets[u], self.row_offsets[u + 1]);
            if lo > hi {
                return Err(Error::Graph(format!("row_offsets decrease at row {u}")));
            }
            let row = &self.col_indices[lo..hi];
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Graph(format!("row {u} not strictly increasing")));
                }
            }
            for &v in row {
                if v >= n {
                    return Err(Error::Graph(format!("neighbor {v} of {u} out of range")));
                }
                if v == u {
                    return Err(Error::Graph(format!("stored self-loop at {u}")));
                }
                if !self.has_edge(v, u) {
                    return Err(Error::Graph(format!("edge ({u}, {v}) lacks its reverse")));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edge count `|E|`.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[u]..self.row_offsets[u + 1]]
    }

    /// Degree excluding the implicit self-loop.
    pub fn degree(&self, u: usize) -> usize {
        self.row_offsets[u + 1] - self.row_offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    /// Index words held by the CSR arrays.
    pub fn index_len(&self) -> usize {
        self.row_offsets.len() + self.col_indices.len()
    }

    /// `A' = A[keep, keep]`: node `i` of the result is node `keep[i]` of `self`.
    ///
    /// `keep` must be strictly increasing and in range.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<Self> {
        for w in keep.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Invalid(format!(
                    "induced_subgraph: indices must be sorted and distinct ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = keep.last() {
            if last >= self.num_nodes {
                return Err(Error::Invalid(format!(
                    "induced_subgraph: index {last} out of range for {} nodes",
                    self.num_nodes
                )));
            }
        }
        const DROPPED: usize = usize::MAX;
        let mut new_id = vec![DROPPED; self.num_nodes];
        for (i, &old) in keep.iter().enumerate() {
            new_id[old] = i;
        }
        let mut row_offsets = Vec::with_capacity(keep.len() + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for &old in keep {
            // neighbors are sorted and new_id is monotone on kept nodes
            col_indices.extend(
                self.neighbors(old)
                    .iter()
                    .map(|&v| new_id[v])
                    .filter(|&v| v != DROPPED),
            );
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            num_nodes: keep.len(),
            row_offsets,
            col_indices,
        })
    }

    /// Mean over the closed neighborhood: `D̂⁻¹ Â X` with `Â = A + I`.
    pub fn spmm_mean<T: Scalar>(&self, x: &NodeFeatures<T>) -> Result<NodeFeatures<T>> {
        if x.rows() != self.num_nodes {
            return Err(Error::shape(
                "spmm_mean",
                format!(
                    "features have {} rows, graph has {} nodes",
                    x.rows(),
                    self.num_nodes
                ),
            ));
        }
        let f = x.cols();
        let mut out = Tensor::zeros(self.num_nodes, f);
        for u in 0..self.num_nodes {
            let nbrs = self.neighbors(u);
            let inv = T::one() / T::of((nbrs.len() + 1) as f64);
            let acc = out.row_mut(u);
            acc.copy_from_slice(x.row(u));
            for &v in nbrs {
                for (a, &b) in acc.iter_mut().zip(x.row(v)) {
                    *a = *a + b;
                }
            }
            acc.iter_mut().for_each(|a| *a = *a * inv);
        }
        Ok(out)
    }

    /// Transpose of [`spmm_mean`](Self::spmm_mean): `Â D̂⁻¹ G`. This is the
    /// backward map of the mean aggregation.
    pub fn spmm_mean_transpose<T: Scalar>(&self, g: &NodeFeatures<T>) -> Result<NodeFeatures<T>> {
        if g.rows() != self.num_nodes {
            return Err(Error::shape(
                "spmm_mean_transpose",
                format!(
                    "gradient has {} rows, graph has {} nodes",
                    g.rows(),
                    self.num_nodes
                ),
            ));
        }
        let f = g.cols();
        let scaled: Vec<T> = (0..self.num_nodes)
            .map(|u| T::one() / T::of((self.degree(u) + 1) as f64))
            .collect();
        let mut out = Tensor::zeros(self.num_nodes, f);
        for u in 0..self.num_nodes {
            let acc = out.row_mut(u);
            for (a, &b) in acc.iter_mut().zip(g.row(u)) {
                *a = b * scaled[u];
            }
            for &v in self.neighbors(u) {
                let s = scaled[v];
                for (a, &b) in acc.iter_mut().zip(g.row(v)) {
                    *a = *a + b * s;
                }
            }
        }
        Ok(out)
    }

    /// One-hot degree features with `max_degree + 1` columns; degrees above
    /// `max_degree` land in the last column.
    pub fn degree_onehot<T: Scalar>(&self, max_degree: usize) -> Result<NodeFeatures<T>> {
        if max_degree == 0 {
            return Err(Error::Invalid(
                "degree_onehot: max_degree must be >= 1".into(),
            ));
        }
        let mut x = Tensor::zeros(self.num_nodes, max_degree + 1);
        for u in 0..self.num_nodes {
            x.set(u, self.degree(u).min(max_degree), T::one());
        }
        Ok(x)
    }

    /// Relabels nodes: node `u` of `self` becomes node `perm[u]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Invalid("permutation length must equal N".into()));
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::from_edges(self.num_nodes, &edges)
    }
}
