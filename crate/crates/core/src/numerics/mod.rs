//! Dense tensors, a reverse-mode tape, and finite-difference verification.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{sigmoid, softplus, Graph, Unary, Var};
pub use params::{Gradients, ParamId, ParameterSet};
pub use tensor::Tensor;
