//! Unicycle kinematics with collision-aware stepping.

use super::world::WorldSpec;
use super::{Control, Pose};

/// Simulation step length in seconds.
pub const DT: f32 = 0.25;
/// Forward speed bounds in m/s; the robot cannot reverse.
pub const V_MAX: f32 = 1.0;
/// Turn rate bound in rad/s.
pub const OMEGA_MAX: f32 = 1.5;
/// Robot body radius in meters.
pub const ROBOT_RADIUS: f32 = 0.15;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f32) -> f32 {
    let mut a = a % std::f32::consts::TAU;
    if a <= -std::f32::consts::PI {
        a += std::f32::consts::TAU;
    } else if a > std::f32::consts::PI {
        a -= std::f32::consts::TAU;
    }
    a
}

/// Exact arc integration of the unicycle for `dt` seconds, ignoring
/// obstacles: straight motion when `omega` is (numerically) zero, otherwise
/// a circular arc of radius `v/omega`.
pub fn integrate_arc(pose: &Pose, v: f32, omega: f32, dt: f32) -> Pose {
    if omega.abs() < 1e-6 {
        Pose {
            x: pose.x + v * dt * pose.phi.cos(),
            y: pose.y + v * dt * pose.phi.sin(),
            phi: wrap_angle(pose.phi + omega * dt),
        }
    } else {
        let r = v / omega;
        let phi1 = pose.phi + omega * dt;
        Pose {
            x: pose.x + r * (phi1.sin() - pose.phi.sin()),
            y: pose.y - r * (phi1.cos() - pose.phi.cos()),
            phi: wrap_angle(phi1),
        }
    }
}

/// Whether a robot disk centered at `(x, y)` intersects any obstacle,
/// landmark, or wall.
pub fn pose_in_collision(world: &WorldSpec, x: f32, y: f32) -> bool {
    let r = ROBOT_RADIUS;
    if x < r || y < r || x > world.width - r || y > world.height - r {
        return true;
    }
    let hits_box = world.obstacles.iter().any(|o| {
        let dx = (x - o.cx).abs() - o.hw;
        let dy = (y - o.cy).abs() - o.hh;
        dx.max(0.0).hypot(dy.max(0.0)) < r
    });
    hits_box || world.landmarks.iter().any(|l| (x - l.x).hypot(y - l.y) < l.r + r)
}

/// Advances one control interval, clamping the command to the actuator
/// bounds and stopping at the first contact with geometry.
///
/// The arc is marched in small substeps; when a substep collides, the
/// contact fraction is bisected so the returned pose sits at the last free
/// point on the arc (within 0.1 mm), never inside an obstacle. Returns the
/// new pose and whether a collision truncated the motion.
pub fn step(world: &WorldSpec, pose: &Pose, control: &Control, dt: f32) -> (Pose, bool) {
    let v = control.v.clamp(0.0, V_MAX);
    let omega = control.omega.clamp(-OMEGA_MAX, OMEGA_MAX);
    if pose_in_collision(world, pose.x, pose.y) {
        return (*pose, true);
    }
    let n_sub = ((v * dt / 0.02).ceil() as usize).max(1);
    let mut free_frac = 0.0f32;
    let mut hit = false;
    for i in 1..=n_sub {
        let f = i as f32 / n_sub as f32;
        let p = integrate_arc(pose, v, omega, f * dt);
        if pose_in_collision(world, p.x, p.y) {
            hit = true;
            // Bisect between the last free fraction and the colliding one.
            let mut lo = free_frac;
            let mut hi = f;
            for _ in 0..24 {
                let mid = 0.5 * (lo + hi);
                let pm = integrate_arc(pose, v, omega, mid * dt);
                if pose_in_collision(world, pm.x, pm.y) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            free_frac = lo;
            break;
        }
        free_frac = f;
    }
    let end = integrate_arc(pose, v, omega, free_frac * dt);
    (end, hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::world::{BoxObstacle, Family};

    fn open_room() -> WorldSpec {
        WorldSpec {
            family: Family::Empty,
            seed: 0,
            width: 6.0,
            height: 6.0,
            obstacles: Vec::new(),
            landmarks: Vec::new(),
        }
    }

    #[test]
    fn straight_motion_advances_v_dt_along_heading() {
        let world = open_room();
        let start = Pose::new(1.0, 1.0, std::f32::consts::FRAC_PI_4);
        let (end, hit) = step(&world, &start, &Control::new(0.8, 0.0), DT);
        assert!(!hit);
        let d = 0.8 * DT;
        assert!((end.x - (1.0 + d * start.phi.cos())).abs() < 1e-6);
        assert!((end.y - (1.0 + d * start.phi.sin())).abs() < 1e-6);
        assert_eq!(end.phi, start.phi);
    }

    #[test]
    fn arc_limits_to_euler_integration_for_small_steps() {
        // Assembling one macro step from many short arcs must agree with
        // fine Euler integration of ẋ = v·cosφ, ẏ = v·sinφ, φ̇ = ω.
        let (v, omega, total) = (0.9f64, 1.2f64, 1.0f64);
        let mut arc = Pose::new(0.0, 0.0, 0.3);
        arc = integrate_arc(&arc, v as f32, omega as f32, total as f32);
        let (mut ex, mut ey, mut ephi) = (0.0f64, 0.0f64, 0.3f64);
        let n = 50_000;
        let dt = total / n as f64;
        for _ in 0..n {
            ex += v * dt * ephi.cos();
            ey += v * dt * ephi.sin();
            ephi += omega * dt;
        }
        assert!((arc.x as f64 - ex).abs() < 1e-3, "{} vs {ex}", arc.x);
        assert!((arc.y as f64 - ey).abs() < 1e-3, "{} vs {ey}", arc.y);
        assert!(wrap_angle(arc.phi - ephi as f32).abs() < 1e-3);
    }

    #[test]
    fn chord_length_never_exceeds_commanded_arc_length() {
        for i in 0..50 {
            let v = 0.1 + 0.018 * i as f32;
            let omega = -1.5 + 0.06 * i as f32;
            let start = Pose::new(0.0, 0.0, 0.7);
            let end = integrate_arc(&start, v, omega, DT);
            let chord = start.distance(&end);
            assert!(chord <= v * DT + 1e-5, "v={v} ω={omega}: chord {chord}");
        }
    }

    #[test]
    fn step_stops_at_wall_contact_without_penetration() {
        let world = open_room();
        // 0.2 m from the far wall, driving straight at it.
        let start = Pose::new(world.width - ROBOT_RADIUS - 0.2, 3.0, 0.0);
        let (end, hit) = step(&world, &start, &Control::new(1.0, 0.0), DT);
        assert!(hit);
        assert!(!pose_in_collision(&world, end.x, end.y));
        let gap = world.width - ROBOT_RADIUS - end.x;
        assert!(gap < 1e-3, "stopped {gap} m short of contact");
    }

    #[test]
    fn step_stops_at_box_contact() {
        let mut world = open_room();
        world.obstacles.push(BoxObstacle { cx: 3.0, cy: 3.0, hw: 0.5, hh: 0.5 });
        let start = Pose::new(2.2, 3.0, 0.0);
        let (end, hit) = step(&world, &start, &Control::new(1.0, 0.0), DT);
        assert!(hit);
        assert!(!pose_in_collision(&world, end.x, end.y));
        assert!((2.5 - ROBOT_RADIUS - end.x).abs() < 1e-3);
        // Pushing further stays put.
        let (end2, hit2) = step(&world, &end, &Control::new(1.0, 0.0), DT);
        assert!(hit2);
        assert!(end2.distance(&end) < 1e-3);
    }

    #[test]
    fn commands_are_clamped_to_actuator_bounds() {
        let world = open_room();
        let start = Pose::new(3.0, 3.0, 0.0);
        let (fast, _) = step(&world, &start, &Control::new(50.0, 0.0), DT);
        let (maxed, _) = step(&world, &start, &Control::new(V_MAX, 0.0), DT);
        assert_eq!(fast, maxed);
        let (neg, _) = step(&world, &start, &Control::new(-1.0, 0.0), DT);
        assert_eq!(neg, start, "reverse commands clamp to zero speed");
    }
}
