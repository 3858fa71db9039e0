//! Action optimization over imagined futures.
//!
//! The planner turns the world model into a controller: candidate control
//! sequences are rolled out to waypoints ([`rollout_unicycle`]), imagined
//! with one batched model call, scored against a goal ([`GoalSpec`]), and
//! refined by a cross-entropy method seeded with a fixed anchor grid
//! ([`cem_plan`]). A topological memory ([`TopoGraph`]) supplies image
//! subgoals along a demonstration for long-horizon image goals, and
//! [`navigate_episode`] closes the loop: plan, execute the first control,
//! replan.

mod cem;
mod episode;
mod rollout;
mod score;
mod topo;

pub use cem::{
    cem_optimize, cem_plan, cem_plan_with_scorer, InitMode, IterationStats, PlanConfig,
    PlanResult, Predictor, ScoredCandidate,
};
pub use episode::{navigate_episode, EpisodeGoal, EpisodeTrace, StepLog};
pub use rollout::{
    default_anchors, make_anchors, random_candidates, rollout_unicycle, terminal_spread, AnchorSet,
    ControlSequence, PLAN_DT,
};
pub use score::{
    score_image_goal, score_language_builtin, score_point_goal, ExternalScorer, GoalSpec,
    LanguageScorer,
};
pub use topo::{build_topograph, next_subgoal, topo_localize, TopoGraph};

use thiserror::Error;

use crate::navsim::SimError;
use crate::worldmodel::WmError;

#[derive(Debug, Error)]
pub enum PlanError {
    /// A precondition of the planning API was violated by the caller.
    #[error("planning contract violated: {0}")]
    Contract(String),
    /// A goal scorer failed (external process, protocol, timeout).
    #[error("scoring failed: {0}")]
    Scoring(String),
    /// Every candidate in a CEM iteration scored non-finite.
    #[error("no candidate received a finite score")]
    NoFiniteCandidate,
    #[error(transparent)]
    Model(#[from] WmError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
