//! Dense arrays and tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_subset};
pub use tape::{scalar, Gradients, Tape, Var, RMS_EPS};
pub use tensor::Tensor;
