//! Experiment orchestration: pretraining, adversarial meta-training,
//! evaluation, ablations and gradient checks.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod run;
pub mod train;
