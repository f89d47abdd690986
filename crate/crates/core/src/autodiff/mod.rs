//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Reduction, Var};
pub use tensor::Tensor;
