//! Semantic raycast renderer.
//!
//! One ray per image column is cast over the field of view; analytic
//! ray-box and ray-disk intersections find the nearest surface. Each column
//! is painted as a vertical band whose height falls off with hit distance
//! (ceiling above, floor below), which gives the flat world a cheap
//! perspective cue. Channel 3 stores the column's normalized depth.

use crate::ndgrad::Tensor;

use super::world::{WorldSpec, CEILING_RGB, FLOOR_RGB, OBSTACLE_RGB, WALL_RGB};
use super::{Pose, SimError};

/// Image side length in pixels (and number of rays).
pub const IMG: usize = 32;
/// Channels per observation: three semantic colors plus depth.
pub const OBS_CHANNELS: usize = 4;
/// Horizontal field of view in radians.
pub const FOV: f32 = std::f32::consts::FRAC_PI_2;
/// Depth readings saturate at this range (meters).
pub const DEPTH_MAX: f32 = 5.0;

/// One camera frame: a `[4, 32, 32]` tensor in channel-major order with
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Tensor,
}

impl Observation {
    pub fn from_tensor(data: Tensor) -> Result<Self, SimError> {
        if data.shape() != [OBS_CHANNELS, IMG, IMG] {
            return Err(SimError::Dataset(format!(
                "observation tensor has shape {:?}, want [{OBS_CHANNELS}, {IMG}, {IMG}]",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * IMG + y) * IMG + x]
    }

    /// Mean depth over the central third of the image.
    pub fn central_depth(&self) -> f32 {
        let lo = IMG / 3;
        let hi = 2 * IMG / 3;
        let mut sum = 0.0;
        let mut count = 0;
        for y in lo..hi {
            for x in lo..hi {
                sum += self.at(3, y, x);
                count += 1;
            }
        }
        sum / count as f32
    }
}

struct Hit {
    dist: f32,
    rgb: [f32; 3],
}

/// Renders the camera view at `pose`; errors when the pose is outside the
/// room extents.
pub fn render(world: &WorldSpec, pose: &Pose) -> Result<Observation, SimError> {
    if !world.contains(pose.x, pose.y) {
        return Err(SimError::OutsideRoom { x: pose.x, y: pose.y, w: world.width, h: world.height });
    }
    let mut data = vec![0.0f32; OBS_CHANNELS * IMG * IMG];
    for col in 0..IMG {
        // Column 0 is the leftmost ray (largest positive angular offset).
        let ang = pose.phi + (0.5 - (col as f32 + 0.5) / IMG as f32) * FOV;
        let hit = cast_ray(world, pose.x, pose.y, ang.cos(), ang.sin());
        paint_column(&mut data, col, &hit);
    }
    Ok(Observation { data: Tensor::from_vec(&[OBS_CHANNELS, IMG, IMG], data).expect("sized") })
}

/// Encodes the RGB channels as a binary PPM (P6), 8 bits per sample. Used
/// by image dumps and the external-scorer protocol.
pub fn observation_to_ppm(obs: &Observation) -> Vec<u8> {
    let mut out = format!("P6\n{IMG} {IMG}\n255\n").into_bytes();
    for y in 0..IMG {
        for x in 0..IMG {
            for c in 0..3 {
                out.push((obs.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Encodes the depth channel as a binary PGM (P5), 8 bits per sample.
pub fn observation_to_pgm(obs: &Observation) -> Vec<u8> {
    let mut out = format!("P5\n{IMG} {IMG}\n255\n").into_bytes();
    for y in 0..IMG {
        for x in 0..IMG {
            out.push((obs.at(3, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// A fully blocked view: wall color everywhere at zero depth. Planners use
/// this for imagined poses that leave the room, where a real render is
/// undefined; its zero depth marks the pose as maximally obstructed.
pub fn render_blocked_view() -> Observation {
    let mut data = vec![0.0f32; OBS_CHANNELS * IMG * IMG];
    for c in 0..3 {
        data[c * IMG * IMG..(c + 1) * IMG * IMG].fill(WALL_RGB[c]);
    }
    Observation { data: Tensor::from_vec(&[OBS_CHANNELS, IMG, IMG], data).expect("sized") }
}

fn paint_column(data: &mut [f32], col: usize, hit: &Hit) {
    let depth = (hit.dist.min(DEPTH_MAX) / DEPTH_MAX).max(0.0);
    let half = (IMG as f32 / 2.0) / hit.dist.max(1e-3);
    let center = IMG as f32 / 2.0;
    for y in 0..IMG {
        let rgb = if ((y as f32 + 0.5) - center).abs() <= half {
            hit.rgb
        } else if (y as f32) < center {
            CEILING_RGB
        } else {
            FLOOR_RGB
        };
        for (c, &v) in rgb.iter().enumerate() {
            data[(c * IMG + y) * IMG + col] = v;
        }
        data[(3 * IMG + y) * IMG + col] = depth;
    }
}

fn cast_ray(world: &WorldSpec, ox: f32, oy: f32, dx: f32, dy: f32) -> Hit {
    // The camera sits inside the room, so the exit through the walls always
    // exists and bounds the search.
    let mut best = Hit { dist: room_exit(world, ox, oy, dx, dy), rgb: WALL_RGB };
    for o in &world.obstacles {
        if let Some(t) = ray_box_entry(ox, oy, dx, dy, o.cx - o.hw, o.cy - o.hh, o.cx + o.hw, o.cy + o.hh) {
            if t < best.dist {
                best = Hit { dist: t, rgb: OBSTACLE_RGB };
            }
        }
    }
    for l in &world.landmarks {
        if let Some(t) = ray_disk_entry(ox, oy, dx, dy, l.x, l.y, l.r) {
            if t < best.dist {
                best = Hit { dist: t, rgb: l.rgb() };
            }
        }
    }
    best
}

/// Distance along the ray to the room boundary, for an origin inside it.
fn room_exit(world: &WorldSpec, ox: f32, oy: f32, dx: f32, dy: f32) -> f32 {
    let mut t = f32::INFINITY;
    if dx > 1e-9 {
        t = t.min((world.width - ox) / dx);
    } else if dx < -1e-9 {
        t = t.min(-ox / dx);
    }
    if dy > 1e-9 {
        t = t.min((world.height - oy) / dy);
    } else if dy < -1e-9 {
        t = t.min(-oy / dy);
    }
    t.max(0.0)
}

/// Slab-test entry distance of a ray into an axis-aligned box, if positive.
/// Origins inside the box report a zero-distance hit.
fn ray_box_entry(ox: f32, oy: f32, dx: f32, dy: f32, x0: f32, y0: f32, x1: f32, y1: f32) -> Option<f32> {
    let mut tmin = f32::NEG_INFINITY;
    let mut tmax = f32::INFINITY;
    for (o, d, lo, hi) in [(ox, dx, x0, x1), (oy, dy, y0, y1)] {
        if d.abs() < 1e-9 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (mut a, mut b) = ((lo - o) / d, (hi - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            tmin = tmin.max(a);
            tmax = tmax.min(b);
        }
    }
    if tmax < tmin || tmax <= 0.0 {
        None
    } else {
        Some(tmin.max(0.0))
    }
}

/// Nearest non-negative intersection of a ray with a disk boundary.
/// Origins inside the disk report a zero-distance hit.
fn ray_disk_entry(ox: f32, oy: f32, dx: f32, dy: f32, cx: f32, cy: f32, r: f32) -> Option<f32> {
    let (fx, fy) = (ox - cx, oy - cy);
    let b = fx * dx + fy * dy;
    let c = fx * fx + fy * fy - r * r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}
