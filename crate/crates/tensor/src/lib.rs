//! Dense CPU tensors, define-by-run reverse-mode differentiation, and the
//! Adam optimizer.

mod autograd;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
mod optim;
mod param;
mod real;
mod tensor;

pub use autograd::{grad_enabled, no_grad, NoGradGuard, Var};
pub use error::{Result, TensorError};
pub use optim::{adam_step, AdamConfig};
pub use param::{Param, ParamState};
pub use real::Real;
pub use tensor::Tensor;
