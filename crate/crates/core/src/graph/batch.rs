use super::{NodeFeatures, SparseGraph};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph<T> {
    pub graph: SparseGraph,
    pub features: NodeFeatures<T>,
    pub label: usize,
}

impl<T: Scalar> LabeledGraph<T> {
    pub fn new(graph: SparseGraph, features: NodeFeatures<T>, label: usize) -> Result<Self> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::shape(
                "LabeledGraph::new",
                format!(
                    "{} feature rows for {} nodes",
                    features.rows(),
                    graph.num_nodes()
                ),
            ));
        }
        Ok(Self {
            graph,
            features,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Block-diagonal union of several graphs, nodes laid out graph by graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch<T> {
    pub merged_graph: SparseGraph,
    pub merged_features: NodeFeatures<T>,
    pub graph_of_node: Vec<usize>,
    pub node_counts: Vec<usize>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn num_graphs(&self) -> usize {
        self.node_counts.len()
    }

    /// Segment boundaries: graph `g` owns merged nodes `offsets[g]..offsets[g+1]`.
    pub fn offsets(&self) -> Vec<usize> {
        offsets_from_counts(&self.node_counts)
    }

    /// Recovers graph `g` exactly as it was batched.
    pub fn extract(&self, g: usize) -> Result<LabeledGraph<T>> {
        let offs = self.offsets();
        let keep: Vec<usize> = (offs[g]..offs[g + 1]).collect();
        Ok(LabeledGraph {
            graph: self.merged_graph.induced_subgraph(&keep)?,
            features: self.merged_features.select_rows(&keep),
            label: self.labels[g],
        })
    }
}

pub(crate) fn offsets_from_counts(counts: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(counts.len() + 1);
    offs.push(0);
    let mut acc = 0;
    for &c in counts {
        acc += c;
        offs.push(acc);
    }
    offs
}

/// Merges graphs into one block-diagonal graph with per-graph node offsets.
pub fn batch_graphs<T: Scalar>(graphs: &[&LabeledGraph<T>]) -> Result<GraphBatch<T>> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Invalid("batch_graphs: empty list".into()))?;
    let f = first.features.cols();
    if let Some(bad) = graphs.iter().find(|g| g.features.cols() != f) {
        return Err(Error::shape(
            "batch_graphs",
            format!("feature dimension {} differs from {f}", bad.features.cols()),
        ));
    }
    let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let total_adj: usize = graphs.iter().map(|g| g.graph.col_indices().len()).sum();

    let mut row_offsets = Vec::with_capacity(total + 1);
    let mut col_indices = Vec::with_capacity(total_adj);
    let mut values = Vec::with_capacity(total * f);
    let mut graph_of_node = Vec::with_capacity(total);
    let mut node_counts = Vec::with_capacity(graphs.len());
    let mut labels = Vec::with_capacity(graphs.len());
    row_offsets.push(0);
    let mut base = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let n = g.num_nodes();
        for u in 0..n {
            col_indices.extend(g.graph.neighbors(u).iter().map(|&v| v + base));
            row_offsets.push(col_indices.len());
        }
        values.extend_from_slice(g.features.values());
        graph_of_node.extend(std::iter::repeat_n(gi, n));
        node_counts.push(n);
        labels.push(g.label);
        base += n;
    }
    // Per-graph CSR invariants carry over to the disjoint union.
    let merged_graph = SparseGraph {
        num_nodes: total,
        row_offsets,
        col_indices,
    };
    Ok(GraphBatch {
        merged_graph,
        merged_features: Tensor::from_vec(total, f, values)?,
        graph_of_node,
        node_counts,
        labels,
    })
}
