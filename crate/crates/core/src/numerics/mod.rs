//! Dense tensors, a reverse-accumulation graph, and finite-difference checks.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference, grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
