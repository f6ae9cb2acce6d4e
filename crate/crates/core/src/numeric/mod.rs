//! Dense tensors, reverse-mode autodiff, seeded randomness and gradient
//! verification.

mod fdcheck;
mod real;
mod rng;
mod tape;
mod tensor;

pub use fdcheck::{finite_difference_check, finite_difference_check_with, MAX_CHECKED_COORDS};
pub use real::{dot, sq_norm, Real};
pub use rng::{Rng, Stream};
pub use tape::{Gradients, Tape, TokenLossKind, Var, VjpOptions};
pub use tensor::Tensor;

