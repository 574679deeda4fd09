//! Differentiable operations, implemented as methods on [`Var`](super::Var).

mod attention;
mod conv;
pub(crate) mod elementwise;
mod matmul;
pub(crate) mod norm;
pub(crate) mod shape;

pub use attention::{RegionMask, MASK_PENALTY};
