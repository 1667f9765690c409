//! Tensor values, learnable parameters and reverse-mode differentiation.

pub mod ops;
mod param;
mod tape;

pub use param::{Param, ParamSet};
pub use tape::{Tape, Var, VjpArgs};
