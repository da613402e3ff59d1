//! Benchmark ingestion and fold generation.

mod folds;
pub mod synthetic;
mod tu;

pub use folds::{kfold, stratified_kfold, FoldSplit};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::scalar::Scalar;

/// Smallest and largest degree bound the percentile policy may produce.
pub const DEGREE_BOUND_RANGE: (usize, usize) = (1, 400);
/// Percentile of training-node degrees used as the one-hot bound.
pub const DEGREE_PERCENTILE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    NodeLabelsOnehot,
    NodeAttributes,
    DegreeOnehot,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NodeLabelsOnehot => "node_labels_onehot",
            Self::NodeAttributes => "node_attributes",
            Self::DegreeOnehot => "degree_onehot",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A parsed graph-classification benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub graphs: Vec<LabeledGraph<T>>,
    pub num_classes: usize,
    pub feature_kind: FeatureKind,
    /// Original graph label for each contiguous class index.
    pub label_values: Vec<i64>,
    /// Original node label for each one-hot column (label features only).
    pub node_label_values: Vec<i64>,
    /// Bound used for the current degree features, if any.
    pub max_degree: Option<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.features.cols())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    /// Degree bound from the nodes of the given graphs.
    pub fn degree_bound(&self, indices: &[usize]) -> usize {
        degree_percentile_bound(indices.iter().map(|&i| &self.graphs[i]), DEGREE_PERCENTILE)
    }

    /// Rebuilds one-hot degree features with the given bound. Fails for
    /// datasets that carry their own node features.
    pub fn set_degree_features(&mut self, max_degree: usize) -> Result<()> {
        if self.feature_kind != FeatureKind::DegreeOnehot {
            return Err(Error::Invalid(format!(
                "dataset {} uses {} features",
                self.name, self.feature_kind
            )));
        }
        for g in &mut self.graphs {
            g.features = g.graph.degree_onehot(max_degree)?;
        }
        self.max_degree = Some(max_degree);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&LabeledGraph<T>> {
        indices.iter().map(|&i| &self.graphs[i]).collect()
    }
}

/// Nearest-rank percentile of node degrees, clamped to
/// [`DEGREE_BOUND_RANGE`].
pub fn degree_percentile_bound<'a, T: 'a>(
    graphs: impl IntoIterator<Item = &'a LabeledGraph<T>>,
    q: f64,
) -> usize {
    let mut degrees: Vec<usize> = graphs
        .into_iter()
        .flat_map(|g| (0..g.graph.num_nodes()).map(|u| g.graph.degree(u)))
        .collect();
    let (lo, hi) = DEGREE_BOUND_RANGE;
    if degrees.is_empty() {
        return lo;
    }
    degrees.sort_unstable();
    let rank = ((q * degrees.len() as f64).ceil() as usize).clamp(1, degrees.len());
    degrees[rank - 1].clamp(lo, hi)
}
