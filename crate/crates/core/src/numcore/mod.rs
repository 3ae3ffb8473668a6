//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Every forward op is a method on [`Tape`] that appends a node and returns a [`Var`].
//! [`Tape::backward`] walks the nodes in reverse insertion order and never mutates the
//! tape, so calling it twice on the same root yields identical gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi, Coords, DEFAULT_STEP};
pub use params::{normal, uniform, xavier, Bound, ParamId, ParamStore};
pub use tape::{BinaryKind, Gradients, LevelShape, Tape, UnaryKind, Var};
pub use tensor::Tensor;
