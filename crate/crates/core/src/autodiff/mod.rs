//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are methods on [`Var`], a copyable handle into a [`Tape`].
//! Calling [`Tape::backward`] on a scalar sweeps the tape in reverse and
//! returns [`Gradients`] for every differentiable leaf. Values consumed by
//! several operations accumulate the gradients of all consumers.
//!
//! ```
//! use mofme::autodiff::Tape;
//! use mofme::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
pub mod kernels;
mod ops;
mod tape;

pub use ops::dropout;
pub use tape::{Gradients, NodeId, Tape, Var};

#[cfg(test)]
mod tests;
