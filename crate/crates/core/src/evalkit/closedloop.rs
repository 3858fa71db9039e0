//! Closed-loop navigation evaluation: a suite of episodes run to
//! completion, logged as JSON lines, and summarized as SR / SPL.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::navsim::{Pose, WorldSpec};
use crate::planner::{navigate_episode, EpisodeGoal, PlanConfig};
use crate::worldmodel::Model;

use super::metrics::{spl, success_rate};
use super::{EpisodeResult, EvalError};

/// One episode of a navigation suite.
pub struct EpisodeSpec {
    pub world: WorldSpec,
    pub start: Pose,
    pub goal: EpisodeGoal,
    pub seed: u64,
}

/// Suite-level aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedLoopSummary {
    pub episodes: usize,
    pub sr: f32,
    pub spl: f32,
    /// Episodes that errored and were recorded as failures.
    pub errors: usize,
    /// Mean wall time per executed step, dominated by the planning call.
    pub mean_plan_time_s: f64,
    pub mean_steps: f32,
}

fn error_result(spec: &EpisodeSpec) -> EpisodeResult {
    let (gx, gy) = spec.goal.target();
    EpisodeResult {
        success: false,
        path_len: 0.0,
        shortest_len: 0.0,
        steps: 0,
        final_dist: (spec.start.x - gx).hypot(spec.start.y - gy),
        goal_tag: spec.goal.tag().into(),
        seed: spec.seed,
    }
}

/// Runs every episode of the suite, in parallel up to the thread budget.
/// An episode that errors is recorded as a failure and the run continues.
/// When `log_path` is given, one JSON line per [`EpisodeResult`] is written
/// in suite order.
pub fn run_closed_loop(
    suite: &[EpisodeSpec],
    model: Option<&Model>,
    cfg: &PlanConfig,
    log_path: Option<&Path>,
) -> Result<(Vec<EpisodeResult>, ClosedLoopSummary), EvalError> {
    if suite.is_empty() {
        return Err(EvalError::Contract("closed-loop suite is empty".into()));
    }
    let threads = crate::thread_budget().clamp(1, suite.len());
    let slots: Mutex<Vec<Option<(EpisodeResult, f64, bool)>>> = Mutex::new(vec![None; suite.len()]);
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= suite.len() {
                    break;
                }
                let spec = &suite[i];
                let started = Instant::now();
                let (result, errored) =
                    match navigate_episode(&spec.world, spec.start, &spec.goal, model, cfg, spec.seed) {
                        Ok(trace) => (trace.summary, false),
                        Err(_) => (error_result(spec), true),
                    };
                let wall = started.elapsed().as_secs_f64();
                slots.lock().expect("no panics while locked")[i] = Some((result, wall, errored));
            });
        }
    });
    let mut results = Vec::with_capacity(suite.len());
    let mut errors = 0usize;
    let mut total_wall = 0.0f64;
    let mut total_steps = 0usize;
    for slot in slots.into_inner().expect("scope joined") {
        let (r, wall, errored) = slot.expect("every episode ran");
        errors += errored as usize;
        total_wall += wall;
        total_steps += r.steps;
        results.push(r);
    }

    if let Some(path) = log_path {
        let mut out = BufWriter::new(File::create(path)?);
        for r in &results {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }

    let summary = ClosedLoopSummary {
        episodes: results.len(),
        sr: success_rate(&results)?,
        spl: spl(&results)?,
        errors,
        mean_plan_time_s: if total_steps > 0 { total_wall / total_steps as f64 } else { 0.0 },
        mean_steps: total_steps as f32 / results.len() as f32,
    };
    Ok((results, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_world, Family};

    #[test]
    fn suite_runs_logs_and_summarizes_consistently() {
        let world = generate_world(Family::Empty, 12).unwrap();
        let cfg = PlanConfig { t_max: 60, ..PlanConfig::default() };
        let suite = vec![
            EpisodeSpec {
                world: world.clone(),
                start: Pose::new(1.5, 1.5, 0.0),
                goal: EpisodeGoal::Point { x: 3.0, y: 2.5 },
                seed: 1,
            },
            EpisodeSpec {
                world: world.clone(),
                start: Pose::new(4.0, 4.0, 2.0),
                goal: EpisodeGoal::Point { x: 4.1, y: 3.9 },
                seed: 2,
            },
            // Unreachable goal: must be recorded as a failure, not abort.
            EpisodeSpec {
                world,
                start: Pose::new(1.0, 1.0, 0.0),
                goal: EpisodeGoal::Point { x: 99.0, y: 99.0 },
                seed: 3,
            },
        ];
        let dir = std::env::temp_dir().join("navwm_closedloop_test");
        std::fs::create_dir_all(&dir).unwrap();
        let log = dir.join("episodes.jsonl");
        let (results, summary) = run_closed_loop(&suite, None, &cfg, Some(&log)).unwrap();
        assert_eq!(results.len(), 3);
        assert_eq!(summary.errors, 1);
        assert!(!results[2].success);
        assert_eq!(summary.sr, success_rate(&results).unwrap());
        assert_eq!(summary.spl, spl(&results).unwrap());
        assert!(summary.spl <= summary.sr);

        let text = std::fs::read_to_string(&log).unwrap();
        let parsed: Vec<EpisodeResult> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, results);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_suite_is_rejected() {
        assert!(run_closed_loop(&[], None, &PlanConfig::default(), None).is_err());
    }
}
