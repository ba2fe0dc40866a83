//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every adjoint is expressed through the same recorded primitives as the
//! forward pass, so gradients can themselves be differentiated. This is what
//! lets an attacker optimize through a simulated client update.

mod check;
mod kernels;
pub mod nn;
mod tape;
mod tensor;

pub use check::{check_against, check_gradient};
pub use nn::{activation, pool2d, softmax_cross_entropy, Activation, PoolKind};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
