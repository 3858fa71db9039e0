//! Evaluation: open-loop generation quality (PSNR, SSIM), closed-loop
//! navigation outcomes (success rate, SPL), and latency benchmarks, with
//! harnesses that write JSON / JSON-lines artifacts.

mod bench;
mod closedloop;
mod metrics;
mod openloop;
mod suite;

pub use bench::{bench_latency, LatencyReport};
pub use closedloop::{run_closed_loop, ClosedLoopSummary, EpisodeSpec};
pub use metrics::{psnr, psnr_tensors, spl, ssim, ssim_tensors, success_rate};
pub use openloop::{run_open_loop, GenEvalReport};
pub use suite::{build_suite, GoalKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::navsim::SimError;
use crate::planner::PlanError;
use crate::worldmodel::WmError;

/// Outcome of one closed-loop navigation episode — the unit record of
/// navigation evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Meters actually driven.
    pub path_len: f32,
    /// Shortest free path from start to goal on the 0.1 m occupancy grid.
    pub shortest_len: f32,
    /// Simulator steps consumed.
    pub steps: usize,
    /// Distance to the goal when the episode ended.
    pub final_dist: f32,
    /// Goal variant: `point`, `image`, or `language`.
    pub goal_tag: String,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    /// A metric or harness was called outside its contract.
    #[error("evaluation contract violated: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] WmError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}
