//! A small, deterministic transformer engine with pluggable layer-norm
//! placements (PostNorm, PreNorm, SpanNorm and several hybrids), manual
//! backpropagation in `f64`, and diagnostics for studying how signals and
//! gradients propagate through depth.
//!
//! Module map:
//!
//! * [`tensor`], [`rng`], [`init`], [`norm`] — dense math and initialization,
//! * [`model`] — blocks, stacks, forward and backward passes,
//! * [`gradcheck`] — finite-difference verification of the backward pass,
//! * [`dynamics`] — variance traces, gradient-decay fits, Jacobian norms,
//! * [`spectral`] — singular-value metrics and layer similarity,
//! * [`harness`] — config files, tasks, optimizer, training and experiments.

pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod model;
pub mod norm;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
