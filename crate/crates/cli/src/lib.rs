//! Experiment harness: configuration, corpus synthesis, training,
//! evaluation, ablation grids, sensitivity sweeps and gradient checks.

pub mod commands;
pub mod config;
