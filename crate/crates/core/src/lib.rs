//! Desk-scale navigation stack built on a one-step generative world model.
//!
//! The crate is organized as a pipeline: [`navsim`] simulates a differential
//! drive robot in procedurally generated rooms and produces trajectory
//! datasets; [`ndgrad`] supplies the tensor and reverse-mode autodiff
//! machinery; [`worldmodel`] trains a non-autoregressive future-frame
//! predictor with a shortcut flow-matching objective so that inference runs
//! in a single forward pass; [`planner`] optimizes action sequences against
//! imagined futures with a cross-entropy method seeded by motion anchors;
//! [`evalkit`] scores generation quality and closed-loop navigation; and
//! [`cli`] ties the stages together behind reproducible subcommands.

pub mod cli;
pub mod evalkit;
pub mod navsim;
pub mod ndgrad;
pub mod planner;
pub mod worldmodel;

/// Worker threads available to parallel stages: the `NAVWM_THREADS`
/// environment variable when set to a positive integer, otherwise the
/// machine's available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("NAVWM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
