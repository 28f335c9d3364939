//! Experiment plumbing behind the `promptcal` binary: config resolution,
//! the method-by-seed runner, grid search, and plot data emission.

pub mod config;
pub mod experiment;
pub mod grid;
pub mod plots;
