//! 2-D differential-drive simulator with semantic raycast rendering.
//!
//! Worlds are single rooms with axis-aligned box obstacles and colored disk
//! landmarks, generated deterministically from a seed. The robot is a disk
//! with unicycle kinematics; its camera renders 32 rays over a 90° field of
//! view into a 32×32 image with three semantic color channels and one depth
//! channel. A coarse occupancy grid provides reachability and shortest-path
//! queries for the privileged data-collection controller and for
//! success-weighted metrics.

mod dataset;
mod dynamics;
mod grid;
mod render;
mod trajectory;
mod world;

pub use dataset::{load_dataset, save_dataset};
pub use dynamics::{integrate_arc, pose_in_collision, step, wrap_angle, DT, OMEGA_MAX, ROBOT_RADIUS, V_MAX};
pub use grid::OccupancyGrid;
pub use render::{
    observation_to_pgm, observation_to_ppm, render, render_blocked_view, Observation, DEPTH_MAX,
    FOV, IMG, OBS_CHANNELS,
};
pub use trajectory::{
    collect_trajectory, drive_to, relative_waypoint, sample_free_pose, sample_instance_indices,
    sample_training_instance, Trajectory, TrainingInstance,
};
pub use world::{
    generate_world, BoxObstacle, Family, Landmark, WorldSpec, CEILING_RGB, FLOOR_RGB, LANDMARK_COLORS,
    OBSTACLE_RGB, WALL_RGB,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Robot pose in world coordinates; `phi` is the heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f32,
    pub y: f32,
    pub phi: f32,
}

impl Pose {
    pub fn new(x: f32, y: f32, phi: f32) -> Self {
        Self { x, y, phi }
    }

    /// Applies a pose expressed in this pose's frame, returning the world
    /// pose. Inverse of [`relative_waypoint`].
    pub fn compose(&self, rel: &Pose) -> Pose {
        let (s, c) = self.phi.sin_cos();
        Pose {
            x: self.x + c * rel.x - s * rel.y,
            y: self.y + s * rel.x + c * rel.y,
            phi: dynamics::wrap_angle(self.phi + rel.phi),
        }
    }

    pub fn distance(&self, other: &Pose) -> f32 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Commanded forward speed (m/s) and turn rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub v: f32,
    pub omega: f32,
}

impl Control {
    pub fn new(v: f32, omega: f32) -> Self {
        Self { v, omega }
    }
}

/// Simulator errors.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("pose ({x:.2}, {y:.2}) lies outside the {w:.1}×{h:.1} m room")]
    OutsideRoom { x: f32, y: f32, w: f32, h: f32 },
    #[error("trajectory with {len} frames cannot host a context plus {k} futures")]
    TooShort { len: usize, k: usize },
    #[error("could not place {what} in world seed {seed} after {attempts} attempts")]
    Placement { what: &'static str, seed: u64, attempts: usize },
    #[error("no reachable goal from ({x:.2}, {y:.2})")]
    NoReachableGoal { x: f32, y: f32 },
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Nd(#[from] crate::ndgrad::NdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad metadata: {0}")]
    Json(#[from] serde_json::Error),
}
