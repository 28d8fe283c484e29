//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod filter;
mod matmul;
mod norm;
mod reduce;
mod shape;
mod softmax;

pub use conv::{conv2d, conv_transpose2d, ConvGeometry};
pub use elementwise::{activation, Activation};
pub use filter::separable_filter_valid;
pub use matmul::bmm;
pub use norm::channel_norm;
pub use softmax::{causal_mask, masked_softmax, softmax_vec, MASK_VALUE};
