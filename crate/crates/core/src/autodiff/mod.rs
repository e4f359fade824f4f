//! Reverse-mode automatic differentiation over small dense arrays.
//!
//! The tape records eagerly and can be replayed with new leaf bindings.
//! Gradients accumulate in `f64`. Implicit layers plug in through
//! [`CustomOp`].

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck};
pub use real::Real;
pub use tape::{Bindings, CustomForward, CustomOp, Gradients, LeafKind, NodeId, Tape, Var};
pub use tensor::Tensor;
