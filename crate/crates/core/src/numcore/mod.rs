//! Dense tensors with a reverse-mode differentiation tape.
//!
//! Only leaves keep their gradients after [`Graph::backward`]; interior
//! buffers are released as the sweep passes them.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck, RELATIVE_FLOOR};
pub use graph::{Activation, Binary, Gradients, Graph, Var};
pub use tensor::{argmax, log_sum_exp, softmax_slice, Tensor, TensorError};
