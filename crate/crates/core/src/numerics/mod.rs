//! Dense tensors, reverse-mode differentiation and a central-difference
//! gradient checker.

mod graph;
mod tape;
mod tensor;

pub use graph::{finite_diff_check, CheckReport, Graph, NamedTensors};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
