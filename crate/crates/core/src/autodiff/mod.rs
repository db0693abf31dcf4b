//! Dense tensors and tape-based reverse-mode differentiation in `f64`.
//!
//! Every operation on a [`Graph`] appends a node holding its output value
//! and the information its backward rule needs. [`Graph::backward`] walks
//! the tape from the loss back to the leaves. Whether a value needs a
//! gradient is a property of the node: leaves are created with
//! [`Graph::param`] (tracked) or [`Graph::constant`] (not tracked), and
//! derived nodes are tracked when any input is.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_many, GradcheckReport};
pub use graph::{sigmoid, softplus, BackwardFn, Gradients, Graph, ReduceMode, Var};
pub use tensor::Tensor;
