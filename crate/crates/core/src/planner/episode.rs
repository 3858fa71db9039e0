//! Closed-loop navigation: render, plan, execute the first control, replan.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::EpisodeResult;
use crate::navsim::{
    render, step, Control, OccupancyGrid, Pose, WorldSpec, ROBOT_RADIUS,
};
use crate::worldmodel::{patchify, Model};

use super::cem::{cem_plan, PlanConfig, Predictor};
use super::score::GoalSpec;
use super::topo::{next_subgoal, topo_localize, TopoGraph};
use super::PlanError;

/// A navigation task posed in world coordinates. Success is always judged
/// by distance to `(x, y)`; the variant decides what the planner scores.
#[derive(Debug, Clone)]
pub enum EpisodeGoal {
    /// Drive to a world point.
    Point { x: f32, y: f32 },
    /// Reach the end of a demonstration by chasing image subgoals from its
    /// topological memory; `(x, y)` is where the demonstration ended.
    Image { demo: TopoGraph, x: f32, y: f32 },
    /// Reach the landmark a phrase names; `(x, y)` is its true position.
    Language { text: String, x: f32, y: f32 },
}

impl EpisodeGoal {
    pub fn target(&self) -> (f32, f32) {
        match *self {
            EpisodeGoal::Point { x, y }
            | EpisodeGoal::Image { x, y, .. }
            | EpisodeGoal::Language { x, y, .. } => (x, y),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            EpisodeGoal::Point { .. } => "point",
            EpisodeGoal::Image { .. } => "image",
            EpisodeGoal::Language { .. } => "language",
        }
    }
}

/// One executed control, logged with the pose it was planned from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Pose before the step — the pose the plan was made from.
    pub pose: Pose,
    pub v: f32,
    pub omega: f32,
    /// Best plan score at this step.
    pub score: f32,
    /// Whether geometry truncated the motion.
    pub collided: bool,
}

/// Full record of one episode: the summary result plus enough detail to
/// replay the run control by control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub summary: EpisodeResult,
    pub start: Pose,
    pub goal_x: f32,
    pub goal_y: f32,
    pub steps: Vec<StepLog>,
}

/// World-frame goal coordinates expressed relative to `pose`.
fn to_relative(pose: &Pose, gx: f32, gy: f32) -> (f32, f32) {
    let (dx, dy) = (gx - pose.x, gy - pose.y);
    let (s, c) = pose.phi.sin_cos();
    (c * dx + s * dy, c * dy - s * dx)
}

/// Runs one closed-loop episode: plan with CEM, execute the first control,
/// replan from the new pose, until within `cfg.success_radius` of the goal
/// or `cfg.t_max` steps. `model` imagines candidate futures; `None` plans
/// against ground-truth renders instead, which isolates planner behavior
/// from model quality. The whole episode is a deterministic function of its
/// arguments.
pub fn navigate_episode(
    world: &WorldSpec,
    start: Pose,
    goal: &EpisodeGoal,
    model: Option<&Model>,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<EpisodeTrace, PlanError> {
    cfg.validate()?;
    let (gx, gy) = goal.target();
    if !world.contains(start.x, start.y) {
        return Err(PlanError::Contract(format!("start ({}, {}) is outside the room", start.x, start.y)));
    }
    if !world.contains(gx, gy) {
        return Err(PlanError::Contract(format!("goal ({gx}, {gy}) is outside the room")));
    }
    let grid = OccupancyGrid::build(world, ROBOT_RADIUS);
    let from = grid
        .nearest_free(start.x, start.y)
        .ok_or_else(|| PlanError::Contract("start pose has no free cell nearby".into()))?;
    let to = grid
        .nearest_free(gx, gy)
        .ok_or_else(|| PlanError::Contract("goal has no free cell nearby".into()))?;
    let shortest_len = grid
        .shortest_path_len(from, to)
        .ok_or_else(|| PlanError::Contract(format!("goal ({gx}, {gy}) unreachable from start")))?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pose = start;
    let mut path_len = 0.0f32;
    let mut steps = Vec::new();
    let mut last_node = 0usize;
    let mut success = pose.distance(&Pose::new(gx, gy, 0.0)) < cfg.success_radius;

    while !success && steps.len() < cfg.t_max {
        let obs = render(world, &pose)?;
        let plan_goal = match goal {
            EpisodeGoal::Point { .. } => {
                let (rx, ry) = to_relative(&pose, gx, gy);
                GoalSpec::Point { x: rx, y: ry }
            }
            EpisodeGoal::Image { demo, .. } => {
                let latent = patchify(&obs);
                last_node = topo_localize(&latent, demo, last_node)?;
                GoalSpec::Image(next_subgoal(demo, last_node)?)
            }
            EpisodeGoal::Language { text, .. } => GoalSpec::Language(text.clone()),
        };
        let predictor = match model {
            Some(m) => Predictor::Learned(m),
            None => Predictor::Oracle { world, pose },
        };
        let plan = cem_plan(&obs, &plan_goal, &predictor, cfg, &mut rng)?;
        let (v, omega) = plan.best.0[0];
        let (next, collided) = step(world, &pose, &Control::new(v, omega), cfg.dt);
        steps.push(StepLog {
            step: steps.len(),
            pose,
            v,
            omega,
            score: plan.best_score,
            collided,
        });
        path_len += pose.distance(&next);
        pose = next;
        success = (pose.x - gx).hypot(pose.y - gy) < cfg.success_radius;
    }

    let final_dist = (pose.x - gx).hypot(pose.y - gy);
    Ok(EpisodeTrace {
        summary: EpisodeResult {
            success,
            path_len,
            shortest_len,
            steps: steps.len(),
            final_dist,
            goal_tag: goal.tag().into(),
            seed,
        },
        start,
        goal_x: gx,
        goal_y: gy,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{drive_to, generate_world, Family, Trajectory, DT, OMEGA_MAX, V_MAX};
    use crate::planner::build_topograph;

    #[test]
    fn starting_inside_the_radius_succeeds_without_moving() {
        let world = generate_world(Family::Empty, 1).unwrap();
        let start = Pose::new(2.0, 2.0, 0.7);
        let goal = EpisodeGoal::Point { x: 2.3, y: 2.0 };
        let trace = navigate_episode(&world, start, &goal, None, &PlanConfig::default(), 5).unwrap();
        assert!(trace.summary.success);
        assert_eq!(trace.summary.steps, 0);
        assert_eq!(trace.summary.path_len, 0.0);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn oracle_point_goal_crosses_an_empty_room() {
        let world = generate_world(Family::Empty, 12).unwrap();
        let start = Pose::new(1.2, 1.2, 0.3);
        let goal = EpisodeGoal::Point { x: 4.2, y: 3.6 };
        let trace = navigate_episode(&world, start, &goal, None, &PlanConfig::default(), 3).unwrap();
        assert!(
            trace.summary.success,
            "failed: {} steps, final distance {}",
            trace.summary.steps, trace.summary.final_dist
        );
        assert!(trace.summary.steps <= 200);
        assert!(trace.summary.path_len >= trace.summary.shortest_len - 0.6);
        for log in &trace.steps {
            assert!((0.0..=V_MAX).contains(&log.v));
            assert!(log.omega.abs() <= OMEGA_MAX);
        }
    }

    #[test]
    fn logged_controls_replay_to_logged_poses() {
        let world = generate_world(Family::Empty, 12).unwrap();
        let start = Pose::new(1.2, 1.2, 0.3);
        let goal = EpisodeGoal::Point { x: 3.0, y: 2.0 };
        let trace = navigate_episode(&world, start, &goal, None, &PlanConfig::default(), 8).unwrap();
        assert!(trace.summary.success);
        let mut pose = trace.start;
        for log in &trace.steps {
            assert!((pose.x - log.pose.x).abs() < 1e-6);
            assert!((pose.y - log.pose.y).abs() < 1e-6);
            assert!((pose.phi - log.pose.phi).abs() < 1e-6);
            pose = step(&world, &pose, &Control::new(log.v, log.omega), DT).0;
        }
        let final_dist = (pose.x - trace.goal_x).hypot(pose.y - trace.goal_y);
        assert!((final_dist - trace.summary.final_dist).abs() < 1e-6);
    }

    #[test]
    fn episodes_are_deterministic_in_their_seed() {
        let world = generate_world(Family::Empty, 30).unwrap();
        let start = Pose::new(1.5, 3.0, 0.0);
        let goal = EpisodeGoal::Point { x: 3.5, y: 3.0 };
        let cfg = PlanConfig { t_max: 6, ..PlanConfig::default() };
        let a = navigate_episode(&world, start, &goal, None, &cfg, 77).unwrap();
        let b = navigate_episode(&world, start, &goal, None, &cfg, 77).unwrap();
        assert_eq!(a.summary, b.summary);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!((x.v, x.omega), (y.v, y.omega));
            assert_eq!(x.pose, y.pose);
        }
    }

    #[test]
    fn image_goal_follows_a_demonstration_corridor() {
        let world = generate_world(Family::Empty, 44).unwrap();
        let start = Pose::new(1.3, 3.0, 0.0);
        let (poses, controls, reached) = drive_to(&world, start, (4.5, 3.2), 0.25, 120).unwrap();
        assert!(reached, "demonstration driver must reach its goal");
        let end = *poses.last().unwrap();
        let observations = poses.iter().map(|p| render(&world, p).unwrap()).collect();
        let demo = Trajectory { world: world.clone(), seed: 0, poses, controls, observations };
        let graph = build_topograph(&demo, 10).unwrap();
        let goal = EpisodeGoal::Image { demo: graph, x: end.x, y: end.y };
        let trace = navigate_episode(&world, start, &goal, None, &PlanConfig::default(), 6).unwrap();
        assert!(
            trace.summary.success,
            "failed: {} steps, final distance {}",
            trace.summary.steps, trace.summary.final_dist
        );
        assert_eq!(trace.summary.goal_tag, "image");
    }

    #[test]
    fn unreachable_goals_are_rejected_upfront() {
        let world = generate_world(Family::Empty, 2).unwrap();
        let start = Pose::new(1.0, 1.0, 0.0);
        let goal = EpisodeGoal::Point { x: 50.0, y: 50.0 };
        let err = navigate_episode(&world, start, &goal, None, &PlanConfig::default(), 1);
        assert!(err.is_err());
    }
}
