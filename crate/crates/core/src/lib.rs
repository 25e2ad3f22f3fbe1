//! Core of an interpretable prototypical-part image classifier: a tensor
//! library with reverse-mode autodiff, image primitives, synthetic dataset
//! generation, the convolutional backbone, class-specific prototypes, staged
//! training, and explanation utilities. Everything is deterministic for a
//! fixed seed and runs on a single CPU core.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod explain;
pub mod img;
pub mod metrics;
pub mod model;
pub mod prototype;
pub mod rng;
pub mod tensor;
pub mod training;
