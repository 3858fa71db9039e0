//! Procedural room generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::ROBOT_RADIUS;
use super::grid::OccupancyGrid;
use super::SimError;

/// Semantic colors for fixed surfaces.
pub const WALL_RGB: [f32; 3] = [0.55, 0.55, 0.55];
pub const FLOOR_RGB: [f32; 3] = [0.20, 0.20, 0.22];
pub const CEILING_RGB: [f32; 3] = [0.85, 0.85, 0.88];
pub const OBSTACLE_RGB: [f32; 3] = [0.45, 0.30, 0.15];

/// Nameable landmark colors; language goals refer to these names.
pub const LANDMARK_COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.15, 0.20, 0.90]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("magenta", [0.85, 0.10, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
];

/// World family: which procedural generator produced a room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Obstacle-free room with a colored landmark near each corner.
    Empty,
    /// Room with a handful of box obstacles plus scattered landmarks.
    Sparse,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "empty" => Ok(Family::Empty),
            "sparse" => Ok(Family::Sparse),
            other => Err(format!("unknown world family '{other}' (expected 'empty' or 'sparse')")),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Empty => "empty",
            Family::Sparse => "sparse",
        })
    }
}

/// Axis-aligned box obstacle described by center and half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub cx: f32,
    pub cy: f32,
    pub hw: f32,
    pub hh: f32,
}

/// Solid colored disk; visible in renders and queryable by color name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f32,
    pub y: f32,
    pub r: f32,
    /// Index into [`LANDMARK_COLORS`].
    pub color: u8,
}

impl Landmark {
    pub fn color_name(&self) -> &'static str {
        LANDMARK_COLORS[self.color as usize].0
    }

    pub fn rgb(&self) -> [f32; 3] {
        LANDMARK_COLORS[self.color as usize].1
    }
}

/// Complete, serializable description of one room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub family: Family,
    pub seed: u64,
    /// Room extents in meters; walls run along x ∈ [0, width], y ∈ [0, height].
    pub width: f32,
    pub height: f32,
    pub obstacles: Vec<BoxObstacle>,
    pub landmarks: Vec<Landmark>,
}

impl WorldSpec {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.width && y <= self.height
    }

    /// First landmark carrying the given color name.
    pub fn landmark_by_color(&self, name: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.color_name() == name)
    }
}

/// Deterministically generates a room for `family` from `seed`.
///
/// Sparse rooms reject obstacles that would disconnect the robot-reachable
/// free space, verified by flood fill on the inflated occupancy grid.
pub fn generate_world(family: Family, seed: u64) -> Result<WorldSpec, SimError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    match family {
        Family::Empty => {
            let (w, h) = (6.0, 6.0);
            let inset = 0.8;
            let mut colors: Vec<u8> = (0..LANDMARK_COLORS.len() as u8).collect();
            colors.shuffle(&mut rng);
            let corners = [(inset, inset), (w - inset, inset), (w - inset, h - inset), (inset, h - inset)];
            let landmarks = corners
                .iter()
                .zip(&colors)
                .map(|(&(x, y), &color)| Landmark { x, y, r: 0.3, color })
                .collect();
            Ok(WorldSpec { family, seed, width: w, height: h, obstacles: Vec::new(), landmarks })
        }
        Family::Sparse => {
            let (w, h) = (8.0, 8.0);
            let mut spec =
                WorldSpec { family, seed, width: w, height: h, obstacles: Vec::new(), landmarks: Vec::new() };
            let n_obstacles = rng.random_range(3..=6);
            let mut attempts = 0;
            while spec.obstacles.len() < n_obstacles && attempts < 200 {
                attempts += 1;
                let hw = rng.random_range(0.3..0.7);
                let hh = rng.random_range(0.3..0.7);
                let cx = rng.random_range(1.0 + hw..w - 1.0 - hw);
                let cy = rng.random_range(1.0 + hh..h - 1.0 - hh);
                let candidate = BoxObstacle { cx, cy, hw, hh };
                spec.obstacles.push(candidate);
                if !free_space_connected(&spec) {
                    spec.obstacles.pop();
                }
            }
            if spec.obstacles.len() < 3 {
                return Err(SimError::Placement { what: "obstacles", seed, attempts });
            }
            let mut colors: Vec<u8> = (0..LANDMARK_COLORS.len() as u8).collect();
            colors.shuffle(&mut rng);
            for &color in colors.iter().take(3) {
                let mut placed = false;
                for _ in 0..200 {
                    attempts += 1;
                    let r = 0.3;
                    let x = rng.random_range(0.6..w - 0.6);
                    let y = rng.random_range(0.6..h - 0.6);
                    let clear_of_boxes = spec.obstacles.iter().all(|o| {
                        let dx = (x - o.cx).abs() - o.hw;
                        let dy = (y - o.cy).abs() - o.hh;
                        dx.max(0.0).hypot(dy.max(0.0)) > r + 0.5
                    });
                    let clear_of_marks = spec.landmarks.iter().all(|l| (x - l.x).hypot(y - l.y) > 1.0);
                    if clear_of_boxes && clear_of_marks {
                        spec.landmarks.push(Landmark { x, y, r, color });
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(SimError::Placement { what: "landmarks", seed, attempts });
                }
            }
            if !free_space_connected(&spec) {
                return Err(SimError::Placement { what: "connected free space", seed, attempts });
            }
            Ok(spec)
        }
    }
}

fn free_space_connected(spec: &WorldSpec) -> bool {
    let grid = OccupancyGrid::build(spec, ROBOT_RADIUS + 0.05);
    grid.free_component_count() == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        for seed in [0, 1, 17] {
            let a = generate_world(Family::Sparse, seed).unwrap();
            let b = generate_world(Family::Sparse, seed).unwrap();
            assert_eq!(a, b);
        }
        assert_ne!(
            generate_world(Family::Sparse, 2).unwrap().obstacles,
            generate_world(Family::Sparse, 3).unwrap().obstacles,
        );
    }

    #[test]
    fn empty_family_has_no_obstacles_and_four_corner_landmarks() {
        let w = generate_world(Family::Empty, 5).unwrap();
        assert!(w.obstacles.is_empty());
        assert_eq!(w.landmarks.len(), 4);
        let names: std::collections::HashSet<_> = w.landmarks.iter().map(|l| l.color_name()).collect();
        assert_eq!(names.len(), 4, "corner landmarks carry distinct colors");
    }

    #[test]
    fn all_geometry_lies_inside_room_extents() {
        for seed in 0..8 {
            let w = generate_world(Family::Sparse, seed).unwrap();
            for o in &w.obstacles {
                assert!(o.cx - o.hw >= 0.0 && o.cx + o.hw <= w.width);
                assert!(o.cy - o.hh >= 0.0 && o.cy + o.hh <= w.height);
            }
            for l in &w.landmarks {
                assert!(l.x - l.r >= 0.0 && l.x + l.r <= w.width);
                assert!(l.y - l.r >= 0.0 && l.y + l.r <= w.height);
            }
        }
    }

    #[test]
    fn sparse_free_space_is_one_connected_component() {
        for seed in 0..8 {
            let w = generate_world(Family::Sparse, seed).unwrap();
            let grid = OccupancyGrid::build(&w, ROBOT_RADIUS + 0.05);
            assert_eq!(grid.free_component_count(), 1, "seed {seed}");
        }
    }
}
