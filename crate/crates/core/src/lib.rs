//! Sparse hierarchical graph classification.
//!
//! A graph classifier built from three layer types: a mean-aggregation graph
//! convolution with a skip projection, a top-k pooling layer that drops nodes
//! according to a learned projection score and gates the survivors with
//! `tanh` of that score, and a mean/max readout taken after every conv-pool
//! block and summed across blocks. Every activation the model allocates is
//! linear in `V + E`; the [`membench`] module contrasts that with the
//! quadratic footprint of a dense soft-assignment pooling baseline.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Training and
//! gradient verification use `f64`; the `*64` aliases below name those
//! instantiations.

pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod layers;
pub mod membench;
pub mod scalar;
pub mod trainer;

pub use engine::{Parameter, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use graph::{GraphBatch, LabeledGraph, NodeFeatures, SparseGraph};
pub use layers::{HierarchicalModel, ModelConfig, ReadoutPosition};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Parameter64 = Parameter<f64>;
pub type Tape64 = Tape<f64>;
pub type LabeledGraph64 = LabeledGraph<f64>;
pub type GraphBatch64 = GraphBatch<f64>;
pub type Model64 = HierarchicalModel<f64>;
pub type Model32 = HierarchicalModel<f32>;
pub type Dataset64 = data::Dataset<f64>;
