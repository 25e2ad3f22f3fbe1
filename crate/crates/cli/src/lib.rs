//! Command-line pipeline around `protoparts-core`: dataset synthesis and
//! on-disk format, training and evaluation runs, explanation artifacts, and
//! embedding plots, all driven by one JSON run configuration.

pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod plot;

pub use protoparts_core as core;
