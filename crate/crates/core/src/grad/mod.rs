//! Reverse-mode differentiation over dense tensors.

mod check;
mod tape;
mod tensor;

pub use check::{analytic_gradients, check_against, finite_difference_check, relative_error, GradCheck};
pub use tape::{softmax_rows, Gradients, OpKind, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

