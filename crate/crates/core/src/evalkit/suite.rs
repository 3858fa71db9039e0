//! Procedural episode suites: deterministic navigation tasks for a family.
//!
//! A suite is a flat list of [`EpisodeSpec`]s over `worlds` generated rooms
//! with `per_world` episodes each. Start poses, goal points, demonstration
//! routes, and landmark phrases are all sampled from the suite seed, so two
//! calls with the same arguments build identical suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::navsim::{
    drive_to, generate_world, render, sample_free_pose, Family, OccupancyGrid, SimError,
    Trajectory, WorldSpec, ROBOT_RADIUS,
};
use crate::planner::{build_topograph, EpisodeGoal};

use super::{EpisodeSpec, EvalError};

/// Which goal modality every episode in a suite uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalKind {
    Point,
    Image,
    Language,
}

impl std::str::FromStr for GoalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point" => Ok(GoalKind::Point),
            "image" => Ok(GoalKind::Image),
            "language" => Ok(GoalKind::Language),
            other => Err(format!(
                "unknown goal kind '{other}' (expected 'point', 'image', or 'language')"
            )),
        }
    }
}

impl std::fmt::Display for GoalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GoalKind::Point => "point",
            GoalKind::Image => "image",
            GoalKind::Language => "language",
        })
    }
}

/// Goals closer than this to the start are resampled while tries remain.
const MIN_GOAL_DIST: f32 = 1.5;
/// Attempts at drawing a well-separated, reachable goal point.
const GOAL_TRIES: usize = 64;
/// Demonstrations count as complete within this distance of their goal.
const DEMO_TOL: f32 = 0.3;
/// Step budget for scripted demonstration drives.
const DEMO_MAX_STEPS: usize = 400;

/// Draws a goal point that is reachable from `(sx, sy)`, preferring points
/// at least [`MIN_GOAL_DIST`] away but accepting any reachable point once
/// the try budget runs out.
fn sample_goal_point(
    world: &WorldSpec,
    grid: &OccupancyGrid,
    sx: f32,
    sy: f32,
    rng: &mut ChaCha12Rng,
) -> Result<(f32, f32), EvalError> {
    let mut fallback = None;
    for _ in 0..GOAL_TRIES {
        let p = sample_free_pose(world, grid, rng)?;
        if !grid.reachable((sx, sy), (p.x, p.y)) {
            continue;
        }
        if (p.x - sx).hypot(p.y - sy) >= MIN_GOAL_DIST {
            return Ok((p.x, p.y));
        }
        fallback = Some((p.x, p.y));
    }
    fallback.ok_or_else(|| {
        EvalError::Contract(format!(
            "no reachable goal point found near ({sx:.2}, {sy:.2}) in world seed {}",
            world.seed
        ))
    })
}

/// Drives a scripted demonstration to `(gx, gy)` and wraps it as a
/// trajectory with rendered frames.
fn demo_trajectory(
    world: &WorldSpec,
    start: crate::navsim::Pose,
    gx: f32,
    gy: f32,
    seed: u64,
) -> Result<Option<Trajectory>, EvalError> {
    // drive_to plans on a more inflated grid than the suite sampler, so a
    // sampled goal may be unreachable for it; that is a retry, not an error.
    let (poses, controls, reached) = match drive_to(world, start, (gx, gy), DEMO_TOL, DEMO_MAX_STEPS)
    {
        Ok(t) => t,
        Err(SimError::NoReachableGoal { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if !reached {
        return Ok(None);
    }
    let mut observations = Vec::with_capacity(poses.len());
    for p in &poses {
        observations.push(render(world, p)?);
    }
    Ok(Some(Trajectory { world: world.clone(), seed, poses, controls, observations }))
}

/// Builds `worlds × per_world` episodes of one goal modality.
///
/// World `w` uses seed `base_seed + w`; episode seeds mix the suite seed
/// with the episode index so disjoint suites never share random streams.
/// Image goals carry a topological memory built from a scripted
/// demonstration with `topo_stride` frames between nodes; language goals
/// name a landmark drawn from the room.
pub fn build_suite(
    family: Family,
    kind: GoalKind,
    worlds: usize,
    per_world: usize,
    base_seed: u64,
    topo_stride: usize,
) -> Result<Vec<EpisodeSpec>, EvalError> {
    if worlds == 0 || per_world == 0 {
        return Err(EvalError::Contract("suite needs at least one world and one episode".into()));
    }
    let mut suite = Vec::with_capacity(worlds * per_world);
    for w in 0..worlds {
        let world = generate_world(family, base_seed + w as u64)?;
        let grid = OccupancyGrid::build(&world, ROBOT_RADIUS);
        for e in 0..per_world {
            let idx = (w * per_world + e) as u64;
            let seed = base_seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(idx + 1);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let start = sample_free_pose(&world, &grid, &mut rng)?;
            let goal = match kind {
                GoalKind::Point => {
                    let (x, y) = sample_goal_point(&world, &grid, start.x, start.y, &mut rng)?;
                    EpisodeGoal::Point { x, y }
                }
                GoalKind::Image => {
                    let mut demo = None;
                    for _ in 0..GOAL_TRIES {
                        let (gx, gy) =
                            sample_goal_point(&world, &grid, start.x, start.y, &mut rng)?;
                        if let Some(t) = demo_trajectory(&world, start, gx, gy, seed)? {
                            demo = Some(t);
                            break;
                        }
                    }
                    let demo = demo.ok_or_else(|| {
                        EvalError::Contract(format!(
                            "no demonstration reached its goal in world seed {}",
                            world.seed
                        ))
                    })?;
                    let end = demo.poses.last().expect("demonstration has poses");
                    let (x, y) = (end.x, end.y);
                    EpisodeGoal::Image { demo: build_topograph(&demo, topo_stride)?, x, y }
                }
                GoalKind::Language => {
                    let l = world.landmarks[rng.random_range(0..world.landmarks.len())];
                    EpisodeGoal::Language {
                        text: format!("go to the {} marker", l.color_name()),
                        x: l.x,
                        y: l.y,
                    }
                }
            };
            suite.push(EpisodeSpec { world: world.clone(), start, goal, seed });
        }
    }
    Ok(suite)
}
