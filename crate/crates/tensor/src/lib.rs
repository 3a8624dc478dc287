//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every forward operation is recorded on a [`Tape`] as it executes; the tape
//! is therefore a valid topological order and [`Tape::backward`] visits each
//! node exactly once in reverse. Values are plain [`Tensor`]s in `f32` or
//! `f64` (see [`Real`]).
//!
//! ```
//! use clim_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let a = tape.param(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0])?);
//! let b = tape.constant(Tensor::from_f64([2, 1], &[1.0, 1.0])?);
//! let c = a.matmul(b)?;
//! assert_eq!(c.value().data(), &[3.0, 7.0]);
//!
//! let grads = tape.backward(c.sum())?;
//! assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
//! # Ok::<(), clim_tensor::TensorError>(())
//! ```

mod backward;
mod error;
pub mod gradcheck;
mod linalg;
mod ops;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::{lit, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
