//! Dense tensors and the reverse-mode tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_at, finite_difference_grad, relative_error, DEFAULT_STEP};
pub use graph::{Graph, RowMask, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
