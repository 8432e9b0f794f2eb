//! Dense `f64` tensors with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, DEFAULT_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, IGNORE_INDEX};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
