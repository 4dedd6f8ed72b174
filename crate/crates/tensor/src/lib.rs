//! Dense tensors, a reverse-mode tape, and an Adam optimizer.
//!
//! The engine is deliberately small: values are immutable `Tensor`s, every
//! op is a method on [`Tape`] that records a backward closure when one of
//! its inputs requires a gradient, and [`Tape::backward`] sweeps the tape in
//! reverse. Domain crates add their own fused ops through [`Tape::record`].

pub mod adam;
pub mod checkpoint;
mod error;
pub mod exec;
pub mod gradcheck;
mod ops;
pub mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use exec::Exec;
pub use ops::elementwise::sigmoid;
pub use ops::reduce::argmax;
pub use ops::sample::resize_source_coord;
pub use params::{kaiming_normal, Bound, Param, ParamStore};
pub use real::{Precision, Real};
pub use tape::{BackwardFn, GradSink, Grads, Tape, Var};
pub use tensor::{Shape, Tensor};
