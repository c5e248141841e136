//! MNIST file IO, run configuration and artifacts for the `unitnorm` command.

pub mod artifacts;
pub mod config;
pub mod idx;
pub mod runner;
