//! Privileged trajectory collection and training-instance sampling.
//!
//! The collector sees the full map: it picks random reachable goals, plans
//! on the occupancy grid, and tracks the plan with a pure-pursuit law. The
//! resulting pose/control/observation sequences are the only training data
//! the world model ever sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::dynamics::{step, wrap_angle, DT, OMEGA_MAX, ROBOT_RADIUS, V_MAX};
use super::grid::OccupancyGrid;
use super::render::{render, Observation};
use super::world::WorldSpec;
use super::{Control, Pose, SimError};

/// One recorded episode of privileged driving.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub world: WorldSpec,
    pub seed: u64,
    /// `T+1` poses; `poses[t+1]` is the dynamics step from `poses[t]` under
    /// `controls[t]`.
    pub poses: Vec<Pose>,
    /// `T` applied controls.
    pub controls: Vec<Control>,
    /// `T+1` rendered frames, aligned with `poses`.
    pub observations: Vec<Observation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Margin added to the robot radius when rasterizing the planning grid.
const PLAN_MARGIN: f32 = 0.1;
/// Pure-pursuit lookahead distance in meters.
const LOOKAHEAD: f32 = 0.4;

/// Pure-pursuit control toward a lookahead point on a path.
fn pursue(path: &[(f32, f32)], pose: &Pose) -> Control {
    // Nearest path vertex, then advance by the lookahead distance.
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, &(px, py)) in path.iter().enumerate() {
        let d = (px - pose.x).hypot(py - pose.y);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    let mut target = path[path.len() - 1];
    let mut acc = 0.0;
    for w in path.windows(2).skip(best) {
        acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
        if acc >= LOOKAHEAD {
            target = w[1];
            break;
        }
    }
    steer_toward(pose, target.0, target.1)
}

/// Proportional steering toward a point: turn rate from heading error,
/// speed scaled down for sharp turns and short remaining distance.
fn steer_toward(pose: &Pose, tx: f32, ty: f32) -> Control {
    let err = wrap_angle((ty - pose.y).atan2(tx - pose.x) - pose.phi);
    let dist = (tx - pose.x).hypot(ty - pose.y);
    let omega = (2.0 * err).clamp(-OMEGA_MAX, OMEGA_MAX);
    let v = (V_MAX * err.cos().max(0.0) * (dist / 0.3).min(1.0)).clamp(0.0, V_MAX);
    Control { v, omega }
}

/// Drives from `start` toward `goal` with grid planning plus pure pursuit,
/// recording every step. Stops within `tol` meters of the goal or after
/// `max_steps`. Returns poses, controls, and whether the goal was reached.
pub fn drive_to(
    world: &WorldSpec,
    start: Pose,
    goal: (f32, f32),
    tol: f32,
    max_steps: usize,
) -> Result<(Vec<Pose>, Vec<Control>, bool), SimError> {
    let grid = OccupancyGrid::build(world, ROBOT_RADIUS + PLAN_MARGIN);
    let from = grid
        .nearest_free(start.x, start.y)
        .ok_or(SimError::NoReachableGoal { x: start.x, y: start.y })?;
    let path = grid
        .shortest_path(from, goal)
        .ok_or(SimError::NoReachableGoal { x: start.x, y: start.y })?;
    let mut poses = vec![start];
    let mut controls = Vec::new();
    let mut pose = start;
    for _ in 0..max_steps {
        if (pose.x - goal.0).hypot(pose.y - goal.1) <= tol {
            return Ok((poses, controls, true));
        }
        let c = pursue(&path, &pose);
        let (next, _) = step(world, &pose, &c, DT);
        controls.push(c);
        poses.push(next);
        pose = next;
    }
    let reached = (pose.x - goal.0).hypot(pose.y - goal.1) <= tol;
    Ok((poses, controls, reached))
}

/// Samples a collision-free pose with uniform position and heading.
pub fn sample_free_pose(world: &WorldSpec, grid: &OccupancyGrid, rng: &mut ChaCha12Rng) -> Result<Pose, SimError> {
    for _ in 0..500 {
        let x = rng.random_range(0.0..world.width);
        let y = rng.random_range(0.0..world.height);
        if grid.is_free_at(x, y) {
            let phi = rng.random_range(-std::f32::consts::PI..std::f32::consts::PI);
            return Ok(Pose::new(x, y, phi));
        }
    }
    Err(SimError::Placement { what: "free pose", seed: world.seed, attempts: 500 })
}

/// Collects one privileged trajectory of `len` controls.
///
/// Goals are resampled whenever one is reached or progress stalls, so the
/// robot keeps moving for the whole episode. Every recorded transition is
/// exactly one [`step`] call; collisions may truncate motion but are
/// recorded as-is.
pub fn collect_trajectory(world: &WorldSpec, len: usize, seed: u64) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x51ed_2701_89ab_cdef);
    let grid = OccupancyGrid::build(world, ROBOT_RADIUS + PLAN_MARGIN);
    let mut pose = sample_free_pose(world, &grid, &mut rng)?;
    let mut poses = Vec::with_capacity(len + 1);
    let mut controls = Vec::with_capacity(len);
    let mut observations = Vec::with_capacity(len + 1);
    poses.push(pose);
    observations.push(render(world, &pose)?);

    let mut path: Vec<(f32, f32)> = Vec::new();
    let mut goal = (pose.x, pose.y);
    let mut stall = 0usize;
    let mut last_goal_dist = f32::INFINITY;
    while controls.len() < len {
        let goal_dist = (pose.x - goal.0).hypot(pose.y - goal.1);
        let need_new_goal = path.is_empty() || goal_dist <= 0.3 || stall > 12;
        if need_new_goal {
            let from = grid
                .nearest_free(pose.x, pose.y)
                .ok_or(SimError::NoReachableGoal { x: pose.x, y: pose.y })?;
            let mut found = false;
            for _ in 0..100 {
                let cand = sample_free_pose(world, &grid, &mut rng)?;
                let d = (pose.x - cand.x).hypot(pose.y - cand.y);
                if d < 1.0 {
                    continue;
                }
                if let Some(p) = grid.shortest_path(from, (cand.x, cand.y)) {
                    path = p;
                    goal = (cand.x, cand.y);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(SimError::NoReachableGoal { x: pose.x, y: pose.y });
            }
            stall = 0;
            last_goal_dist = f32::INFINITY;
        }
        let c = pursue(&path, &pose);
        let (next, _hit) = step(world, &pose, &c, DT);
        let progressed = last_goal_dist - (next.x - goal.0).hypot(next.y - goal.1) > 0.01;
        stall = if progressed { 0 } else { stall + 1 };
        last_goal_dist = (next.x - goal.0).hypot(next.y - goal.1);
        controls.push(c);
        poses.push(next);
        observations.push(render(world, &next)?);
        pose = next;
    }
    Ok(Trajectory { world: world.clone(), seed, poses, controls, observations })
}

/// Pose of `target` expressed in `base`'s frame: `(x, y, φ)` with the
/// heading difference wrapped to `(-π, π]`.
pub fn relative_waypoint(base: &Pose, target: &Pose) -> [f32; 3] {
    let (s, c) = base.phi.sin_cos();
    let dx = target.x - base.x;
    let dy = target.y - base.y;
    let rx = c * dx + s * dy;
    let ry = -s * dx + c * dy;
    [rx, ry, wrap_angle(target.phi - base.phi)]
}

/// A context frame plus `K` future frames and their relative waypoints.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    /// Index of the context frame in the source trajectory.
    pub ctx_idx: usize,
    /// Strictly increasing indices of the `K` future frames; the last one is
    /// the sampled endpoint.
    pub future_idx: Vec<usize>,
    /// Waypoints `(x, y, φ)` of each future pose relative to the context pose.
    pub actions: Vec<[f32; 3]>,
}

/// Draws the index structure of a training instance: a context `i`, an
/// endpoint `j ≥ i + k`, and `k−1` distinct intermediate frames strictly
/// between them, returned sorted with `j` appended.
pub fn sample_instance_indices(
    len: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(usize, Vec<usize>), SimError> {
    if k < 1 || len < k + 2 {
        return Err(SimError::TooShort { len, k });
    }
    let i = rng.random_range(0..=len - k - 2);
    let j = rng.random_range(i + k..len);
    // Sample k−1 distinct interior offsets from (i, j) without replacement.
    let interior = j - i - 1;
    let mut offsets: Vec<usize> = (1..=interior).collect();
    for idx in 0..k - 1 {
        let pick = rng.random_range(idx..interior);
        offsets.swap(idx, pick);
    }
    let mut futures: Vec<usize> = offsets[..k - 1].iter().map(|o| i + o).collect();
    futures.sort_unstable();
    futures.push(j);
    Ok((i, futures))
}

/// Samples a training instance from a trajectory: context frame, `k` future
/// frames, and waypoint actions relative to the context pose.
pub fn sample_training_instance(
    traj: &Trajectory,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<TrainingInstance, SimError> {
    let (i, futures) = sample_instance_indices(traj.len(), k, rng)?;
    let base = &traj.poses[i];
    let actions = futures.iter().map(|&f| relative_waypoint(base, &traj.poses[f])).collect();
    Ok(TrainingInstance { ctx_idx: i, future_idx: futures, actions })
}
