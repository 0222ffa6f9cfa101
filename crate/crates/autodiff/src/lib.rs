//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records every operation on a [`Tape`] and computes exact
//! gradients of a scalar output with respect to any recorded leaf by walking
//! the tape backwards. It is deliberately small: real-valued tensors only,
//! a fixed set of primitives, no implicit broadcasting beyond bias and
//! scalar multiplies, and single-threaded tapes. Complex arithmetic is
//! expressed either as paired channels (a trailing axis of length 2) or as
//! separate real/imaginary tensors via the [`cplx`] helpers.
//!
//! # Example
//!
//! ```
//! use wavelearn_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]));
//! let y = tape.mul(x, x);
//! let s = tape.sum_all(y); // s = sum(x^2)
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Gradients are re-zeroed on every [`Tape::backward`] call, so a tape can
//! be differentiated repeatedly (for example with respect to different
//! outputs) without stale accumulation. Operation order is fixed by the
//! recording order, which makes forward values and gradients bitwise
//! reproducible for identical inputs.

mod chol;
pub mod cplx;
pub mod fd;
mod tape;
mod tensor;

pub use tape::{AdError, Tape, Var};
pub use tensor::Tensor;
