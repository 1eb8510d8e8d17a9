//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, TensorCheck};
pub use tape::{gelu, BatchStats, Tape, Var, GELU_SQRT_2_OVER_PI};
pub use tensor::Tensor;
