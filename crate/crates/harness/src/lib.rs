//! Command-line harness: synthetic data, two-stage training, evaluation,
//! ablations and constant-state inference benchmarks.

pub mod ablate;
pub mod baseline;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod parallel;
pub mod selftest;
pub mod train;
