//! Minimal reverse-mode automatic differentiation over dense, row-major CPU
//! tensors.
//!
//! A [`Tape`] records operations on [`Var`] handles; [`Tape::backward`] sweeps
//! the tape in reverse. Parameters live in a [`ParamStore`] and are read by
//! value into each tape, so a store can be shared by many concurrent
//! inference tapes while a single training loop owns its updates.
//!
//! Heavy kernels (matrix products, convolutions, row-wise softmax) split their
//! output across the rayon pool when the `parallel` feature is on. Splits are
//! by output element, so results are identical with and without it.

mod float;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod par;
mod params;
mod tape;
mod tensor;

pub use float::Float;
pub use ops::shape::concat;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{BackwardFn, Grads, Tape, Var};
pub use tensor::{gemm, Tensor};
