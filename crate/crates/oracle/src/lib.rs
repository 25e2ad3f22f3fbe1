//! Reference implementations for the test suites.
//!
//! Everything here is written as plainly as possible — six nested loops for a
//! convolution, one pass per statistic — so that the optimized kernels in the
//! main crates can be checked against an implementation whose correctness is
//! visible by inspection. The `f32ref` module mirrors the production
//! accumulation order and is used for exact-equality tests; `f64ref`
//! re-evaluates the same math in f64 for finite-difference gradient checks.

pub mod diff;
pub mod f32ref;
pub mod f64ref;
