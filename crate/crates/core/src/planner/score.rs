//! Goal scoring over imagined futures. Lower is better everywhere.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::navsim::{observation_to_ppm, Observation, IMG, LANDMARK_COLORS};
use crate::worldmodel::patchify;

use super::PlanError;

/// What the optimizer is steering toward.
#[derive(Debug, Clone)]
pub enum GoalSpec {
    /// Reach the view shown in an image.
    Image(Observation),
    /// Reach the landmark a phrase names by color.
    Language(String),
    /// Reach a point `(x, y)` in meters, relative to the current pose.
    Point { x: f32, y: f32 },
}

impl GoalSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            GoalSpec::Image(_) => "image",
            GoalSpec::Language(_) => "language",
            GoalSpec::Point { .. } => "point",
        }
    }
}

/// Mean squared latent distance between the final predicted frame and the
/// goal view. The latent transform is a pure rearrangement, so this equals
/// pixel MSE; it is computed in latent space, where the model generates.
pub fn score_image_goal(frames: &[Observation], goal: &Observation) -> f32 {
    let last = frames.last().expect("at least one predicted frame");
    let a = patchify(last);
    let b = patchify(goal);
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += ((x - y) as f64).powi(2);
    }
    (acc / a.numel() as f64) as f32
}

/// Terminal-distance term plus a clearance term: distance from the
/// candidate's terminal waypoint to the goal, minus the mean central-third
/// depth across all predicted frames (deep view ahead = open space).
pub fn score_point_goal(
    frames: &[Observation],
    waypoints: &[[f32; 3]],
    goal_x: f32,
    goal_y: f32,
    lambda1: f32,
    lambda2: f32,
) -> f32 {
    let term = waypoints.last().expect("at least one waypoint");
    let dist = (term[0] - goal_x).hypot(term[1] - goal_y);
    let depth: f32 = frames.iter().map(|f| f.central_depth()).sum::<f32>() / frames.len().max(1) as f32;
    lambda1 * dist + lambda2 * (-depth)
}

/// Per-channel tolerance for deciding that a rendered pixel carries a
/// landmark color; the palette's minimum separation is 0.7, so this cannot
/// confuse two landmarks.
const COLOR_TOL: f32 = 0.25;

/// Fraction of final-frame pixels matching the named landmark color,
/// negated. The color is the first palette name appearing in the text.
pub fn score_language_builtin(frames: &[Observation], text: &str) -> Result<f32, PlanError> {
    let lower = text.to_lowercase();
    let (_, rgb) = LANDMARK_COLORS
        .iter()
        .filter(|(name, _)| lower.contains(name))
        .min_by_key(|(name, _)| lower.find(name).unwrap_or(usize::MAX))
        .ok_or_else(|| {
            PlanError::Contract(format!("no landmark color named in {text:?}; known: red, green, blue, yellow, magenta, cyan"))
        })?;
    let last = frames.last().expect("at least one predicted frame");
    let mut hits = 0usize;
    for y in 0..IMG {
        for x in 0..IMG {
            let matches = (0..3).all(|c| (last.at(c, y, x) - rgb[c]).abs() < COLOR_TOL);
            if matches {
                hits += 1;
            }
        }
    }
    Ok(-(hits as f32) / (IMG * IMG) as f32)
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_ppm_b64: String,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f32,
}

/// A language scorer running as a child process speaking line-delimited
/// JSON: `{"image_ppm_b64": …, "text": …}` in, `{"score": …}` out, one
/// request per line. A slow or misbehaving child fails the score rather
/// than hanging the planner.
pub struct ExternalScorer {
    child: Child,
    stdin: std::process::ChildStdin,
    replies: mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ExternalScorer {
    /// Spawns `program args…`; the child must answer one JSON line per
    /// request line on stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, PlanError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PlanError::Scoring(format!("spawning scorer {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let (tx, replies) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Ok(Self { child, stdin, replies, timeout })
    }

    /// Default per-request timeout of the protocol.
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

    pub fn score(&mut self, frame: &Observation, text: &str) -> Result<f32, PlanError> {
        let req = ScoreRequest {
            image_ppm_b64: base64::engine::general_purpose::STANDARD.encode(observation_to_ppm(frame)),
            text,
        };
        let mut line = serde_json::to_string(&req).map_err(|e| PlanError::Scoring(e.to_string()))?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|()| self.stdin.flush())
            .map_err(|e| PlanError::Scoring(format!("writing to scorer: {e}")))?;
        let reply = self
            .replies
            .recv_timeout(self.timeout)
            .map_err(|_| PlanError::Scoring(format!("scorer silent for {:?}", self.timeout)))?
            .map_err(|e| PlanError::Scoring(format!("reading from scorer: {e}")))?;
        let parsed: ScoreResponse = serde_json::from_str(reply.trim())
            .map_err(|e| PlanError::Scoring(format!("scorer protocol violation: {e} in {reply:?}")))?;
        Ok(parsed.score)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Which implementation scores language goals.
pub enum LanguageScorer {
    /// The synthetic color-fraction scorer; hermetic.
    Builtin,
    /// Delegate to a child process.
    External(ExternalScorer),
}

impl LanguageScorer {
    pub fn score(&mut self, frames: &[Observation], text: &str) -> Result<f32, PlanError> {
        match self {
            LanguageScorer::Builtin => score_language_builtin(frames, text),
            LanguageScorer::External(ext) => {
                ext.score(frames.last().expect("at least one predicted frame"), text)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_world, render, Family, Pose, OBS_CHANNELS};
    use crate::ndgrad::Tensor;

    fn uniform_obs(rgb: [f32; 3], depth: f32) -> Observation {
        let mut data = vec![0.0f32; OBS_CHANNELS * IMG * IMG];
        for c in 0..3 {
            data[c * IMG * IMG..(c + 1) * IMG * IMG].fill(rgb[c]);
        }
        data[3 * IMG * IMG..].fill(depth);
        Observation::from_tensor(Tensor::from_vec(&[OBS_CHANNELS, IMG, IMG], data).unwrap()).unwrap()
    }

    #[test]
    fn image_score_zero_iff_equal_and_symmetric() {
        let a = uniform_obs([0.3, 0.4, 0.5], 0.6);
        let b = uniform_obs([0.5, 0.4, 0.3], 0.2);
        assert_eq!(score_image_goal(&[a.clone()], &a), 0.0);
        let ab = score_image_goal(&[a.clone()], &b);
        let ba = score_image_goal(&[b], &a);
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-7, "MSE is symmetric");
    }

    #[test]
    fn image_score_ranks_nearby_view_below_distant() {
        let world = generate_world(Family::Empty, 3).unwrap();
        let goal_pose = Pose { x: 2.0, y: 3.0, phi: 0.0 };
        let goal = render(&world, &goal_pose).unwrap();
        let near = render(&world, &Pose { x: 1.8, y: 3.0, phi: 0.05 }).unwrap();
        let far = render(&world, &Pose { x: 4.5, y: 1.2, phi: 2.5 }).unwrap();
        assert!(score_image_goal(&[near], &goal) < score_image_goal(&[far], &goal));
    }

    #[test]
    fn point_score_matches_formula_at_extremes() {
        // Terminal on goal with maximal depth everywhere: only the depth
        // bonus remains.
        let open = uniform_obs([0.2; 3], 1.0);
        let wps = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]];
        let s = score_point_goal(&[open.clone(), open.clone()], &wps, 1.5, 0.0, 1.0, 0.5);
        assert!((s - -0.5).abs() < 1e-6);
        // λ₂ = 0 reduces to plain Euclidean distance.
        let s = score_point_goal(&[open], &wps, 3.5, 0.0, 1.0, 0.0);
        assert!((s - 2.0).abs() < 1e-6);
    }

    #[test]
    fn point_score_prefers_open_space_at_equal_distance() {
        use crate::navsim::WorldSpec;
        let world = WorldSpec {
            family: Family::Empty,
            seed: 0,
            width: 6.0,
            height: 6.0,
            obstacles: Vec::new(),
            landmarks: Vec::new(),
        };
        // A view hugging a wall has small central depth; an open view from
        // the room center has large depth.
        let at_wall = render(&world, &Pose { x: 0.2, y: 3.0, phi: std::f32::consts::PI }).unwrap();
        let open = render(&world, &Pose { x: 3.0, y: 3.0, phi: 0.0 }).unwrap();
        let wps = [[1.0, 0.0, 0.0]];
        let goal = (1.0, 0.0);
        let s_wall = score_point_goal(&[at_wall], &wps, goal.0, goal.1, 1.0, 0.5);
        let s_open = score_point_goal(&[open], &wps, goal.0, goal.1, 1.0, 0.5);
        assert!(
            s_wall > s_open,
            "equal terminal distance must rank by clearance: wall {s_wall} vs open {s_open}"
        );
    }

    #[test]
    fn language_builtin_counts_color_fraction() {
        let red = uniform_obs([0.90, 0.10, 0.10], 0.5);
        let grey = uniform_obs([0.5, 0.5, 0.5], 0.5);
        assert_eq!(score_language_builtin(&[red.clone()], "go to the red pillar").unwrap(), -1.0);
        assert_eq!(score_language_builtin(&[grey.clone()], "find the red pillar").unwrap(), 0.0);
        assert!(score_language_builtin(&[grey], "go somewhere nice").is_err());
        // First named color wins when two appear.
        let blue = uniform_obs([0.15, 0.20, 0.90], 0.5);
        assert_eq!(score_language_builtin(&[blue], "the blue one, not the red one").unwrap(), -1.0);
    }

    #[test]
    fn language_ranks_landmark_centered_views() {
        let world = generate_world(Family::Empty, 8).unwrap();
        let lm = world.landmark_by_color(world.landmarks[0].color_name()).unwrap().clone();
        let name = lm.color_name();
        // Stand 1 m from the landmark facing it, vs facing away.
        let toward = (lm.y - 3.0).atan2(lm.x - 3.0);
        let facing = render(
            &world,
            &Pose { x: lm.x - toward.cos(), y: lm.y - toward.sin(), phi: toward },
        )
        .unwrap();
        let away = render(
            &world,
            &Pose {
                x: lm.x - toward.cos(),
                y: lm.y - toward.sin(),
                phi: toward + std::f32::consts::PI,
            },
        )
        .unwrap();
        let text = format!("go to the {name} landmark");
        let s_facing = score_language_builtin(&[facing], &text).unwrap();
        let s_away = score_language_builtin(&[away], &text).unwrap();
        assert!(s_facing < s_away, "{name}: facing {s_facing} vs away {s_away}");
    }

    #[test]
    fn external_scorer_roundtrip_and_timeout() {
        // A tiny shell child implements the protocol: replies 0.25 to the
        // first request, then sleeps past the timeout.
        let script = r#"read line; echo '{"score": 0.25}'; read line; sleep 8"#;
        let mut scorer = ExternalScorer::spawn(
            "sh",
            &["-c".into(), script.into()],
            Duration::from_millis(600),
        )
        .unwrap();
        let frame = uniform_obs([0.2; 3], 0.5);
        assert_eq!(scorer.score(&frame, "anything").unwrap(), 0.25);
        let err = scorer.score(&frame, "again").unwrap_err();
        assert!(matches!(err, PlanError::Scoring(_)), "timeout surfaces as a scoring error");
    }

    #[test]
    fn external_scorer_rejects_protocol_violations() {
        let script = r#"read line; echo 'not json at all'"#;
        let mut scorer = ExternalScorer::spawn(
            "sh",
            &["-c".into(), script.into()],
            Duration::from_secs(2),
        )
        .unwrap();
        let frame = uniform_obs([0.2; 3], 0.5);
        assert!(matches!(scorer.score(&frame, "x"), Err(PlanError::Scoring(_))));
    }
}
