//! Dense tensors with reverse-mode differentiation.

pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod storage;
pub mod tape;

pub use element::{DType, Element};
pub use gradcheck::{finite_difference_check, GradCheckConfig};
pub use ops::RegionMask;
pub use param::{Init, ParamId, ParamSpec, ParamStore, Parameter};
pub use storage::Tensor;
pub use tape::{BackwardFn, NodeId, Tape, Var};
