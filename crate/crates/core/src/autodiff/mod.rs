//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var, DIFFERENTIABLE_OPS};
pub use tensor::{MatView, Real, Tensor};
