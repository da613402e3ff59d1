//! Dense tensors, a reverse-mode tape over the model's primitives,
//! parameters with Glorot initialization and Adam, finite-difference
//! gradient checks, and parameter file I/O.

pub mod gradcheck;
mod ledger;
mod param;
pub mod serialize;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, max_relative_error, relative_error};
pub use ledger::{BufferId, MemoryLedger};
pub use param::{adam_step, glorot_init, Adam, Parameter};
pub use tape::{Gradients, KinkMargin, Tape, Var};
pub use tensor::Tensor;
