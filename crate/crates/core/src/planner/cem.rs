//! Cross-entropy optimization over control sequences.
//!
//! Each iteration rolls every candidate out to waypoints, imagines the
//! resulting futures with one batched model call, scores them against the
//! goal, refits a per-dimension Gaussian to the elites, and resamples. The
//! first iteration's candidates come from the fixed anchor grid, which
//! spreads terminal points across the reachable set far better than random
//! draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::navsim::{render, render_blocked_view, Observation, Pose, WorldSpec, OMEGA_MAX, V_MAX};
use crate::worldmodel::{sample_multistep_batch, ActionSequence, Model, SampleRequest};

use super::rollout::{default_anchors, random_candidates, rollout_unicycle, ControlSequence, PLAN_DT};
use super::score::{score_image_goal, score_point_goal, GoalSpec, LanguageScorer};
use super::PlanError;

/// How the first CEM iteration is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// The fixed 4-speed × 8-turn-rate anchor grid.
    Anchors,
    /// Independent Gaussian controls; the ablation baseline.
    RandomGaussian,
}

/// Knobs for planning and closed-loop execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Candidates scored per iteration.
    pub samples: usize,
    /// Elites kept for the distribution refit.
    pub elites: usize,
    /// CEM iterations per planning call.
    pub iterations: usize,
    /// Control steps per candidate; must equal the model's frame count K.
    pub horizon: usize,
    /// Seconds per control step.
    pub dt: f32,
    /// Per-dimension variance floor, as a fraction of the squared control
    /// bound; keeps the sampling distribution from collapsing early.
    pub var_floor_frac: f32,
    /// Weight of the terminal-distance term in the point-goal score.
    pub lambda1: f32,
    /// Weight of the central-depth clearance term in the point-goal score.
    pub lambda2: f32,
    pub init: InitMode,
    /// Episode success radius in meters.
    pub success_radius: f32,
    /// Episode step budget.
    pub t_max: usize,
    /// Frames between topological-memory nodes.
    pub topo_stride: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            elites: 5,
            iterations: 5,
            horizon: 8,
            dt: PLAN_DT,
            var_floor_frac: 0.01,
            lambda1: 1.0,
            lambda2: 0.5,
            init: InitMode::Anchors,
            success_radius: 0.5,
            t_max: 200,
            topo_stride: 10,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.samples == 0 || self.iterations == 0 || self.horizon == 0 {
            return Err(PlanError::Contract("samples, iterations, and horizon must be positive".into()));
        }
        if self.elites == 0 || self.elites > self.samples {
            return Err(PlanError::Contract(format!(
                "elite count {} must be in 1..={}",
                self.elites, self.samples
            )));
        }
        if !(self.dt > 0.0) || self.var_floor_frac < 0.0 {
            return Err(PlanError::Contract("dt must be positive and the variance floor nonnegative".into()));
        }
        Ok(())
    }
}

/// One scored candidate, kept for qualitative dumps and instrumentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub iteration: usize,
    pub controls: ControlSequence,
    pub score: f32,
}

/// Elite statistics after one iteration's refit, in the flat
/// `[v₀, ω₀, v₁, ω₁, …]` layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Best score seen up to and including this iteration.
    pub best_score: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub best: ControlSequence,
    pub best_waypoints: ActionSequence,
    /// Minimum over every finite score in `scored`.
    pub best_score: f32,
    pub iterations: Vec<IterationStats>,
    pub scored: Vec<ScoredCandidate>,
}

/// The clamp bound of flat control dimension `d`: speeds sit on even
/// indices, turn rates on odd.
fn dim_bound(d: usize) -> f32 {
    if d % 2 == 0 {
        V_MAX
    } else {
        OMEGA_MAX
    }
}

/// Runs the optimizer over an arbitrary batch scorer. `initial` seeds the
/// first iteration and must match `cfg.samples`. The scorer receives the
/// candidates and their rolled-out waypoints and returns one score per
/// candidate, lower better; non-finite scores drop the candidate from
/// selection but stay in the log.
pub fn cem_optimize<F>(
    cfg: &PlanConfig,
    initial: Vec<ControlSequence>,
    rng: &mut ChaCha12Rng,
    mut score_batch: F,
) -> Result<PlanResult, PlanError>
where
    F: FnMut(&[ControlSequence], &[ActionSequence]) -> Result<Vec<f32>, PlanError>,
{
    cfg.validate()?;
    if initial.len() != cfg.samples {
        return Err(PlanError::Contract(format!(
            "{} initial candidates for sample size {}",
            initial.len(),
            cfg.samples
        )));
    }
    if let Some(c) = initial.iter().find(|c| c.len() != cfg.horizon) {
        return Err(PlanError::Contract(format!(
            "candidate has {} steps, horizon is {}",
            c.len(),
            cfg.horizon
        )));
    }
    let dims = 2 * cfg.horizon;
    let mut candidates = initial;
    let mut best: Option<(ControlSequence, f32)> = None;
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut scored = Vec::with_capacity(cfg.samples * cfg.iterations);

    for iter in 0..cfg.iterations {
        let waypoints: Vec<ActionSequence> =
            candidates.iter().map(|c| rollout_unicycle(c, cfg.dt)).collect();
        let scores = score_batch(&candidates, &waypoints)?;
        if scores.len() != candidates.len() {
            return Err(PlanError::Contract(format!(
                "scorer returned {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }

        let mut finite: Vec<(usize, f32)> = Vec::with_capacity(candidates.len());
        for (i, &s) in scores.iter().enumerate() {
            scored.push(ScoredCandidate { iteration: iter, controls: candidates[i].clone(), score: s });
            if s.is_finite() {
                finite.push((i, s));
            }
        }
        if finite.is_empty() {
            return Err(PlanError::NoFiniteCandidate);
        }
        finite.sort_by(|a, b| a.1.total_cmp(&b.1));
        let elites: Vec<usize> = finite.iter().take(cfg.elites).map(|&(i, _)| i).collect();
        let (lead, lead_score) = finite[0];
        if best.as_ref().is_none_or(|(_, s)| lead_score < *s) {
            best = Some((candidates[lead].clone(), lead_score));
        }

        let mut mean = vec![0.0f32; dims];
        for &e in &elites {
            for (m, x) in mean.iter_mut().zip(candidates[e].as_flat()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= elites.len() as f32;
        }
        let mut var = vec![0.0f32; dims];
        for &e in &elites {
            for (d, x) in candidates[e].as_flat().into_iter().enumerate() {
                var[d] += (x - mean[d]).powi(2);
            }
        }
        for (d, v) in var.iter_mut().enumerate() {
            *v /= elites.len() as f32;
            let floor = cfg.var_floor_frac * dim_bound(d).powi(2);
            *v = v.max(floor);
        }
        iterations.push(IterationStats {
            mean: mean.clone(),
            var: var.clone(),
            best_score: best.as_ref().expect("set above").1,
        });

        if iter + 1 < cfg.iterations {
            let mut next = Vec::with_capacity(cfg.samples);
            next.push(candidates[elites[0]].clone());
            while next.len() < cfg.samples {
                let flat: Vec<f32> = (0..dims)
                    .map(|d| mean[d] + var[d].sqrt() * rng.sample::<f32, _>(StandardNormal))
                    .collect();
                next.push(ControlSequence::from_flat(&flat));
            }
            candidates = next;
        }
    }

    let (best_controls, best_score) = best.expect("iterations ≥ 1");
    let best_waypoints = rollout_unicycle(&best_controls, cfg.dt);
    Ok(PlanResult { best: best_controls, best_waypoints, best_score, iterations, scored })
}

/// What imagines the future for scoring.
pub enum Predictor<'a> {
    /// One-step sampling from the learned model.
    Learned(&'a Model),
    /// Ground-truth rendering of the poses the waypoints reach; isolates
    /// planner behavior from model quality. Waypoints leaving the room
    /// render as a blocked view.
    Oracle { world: &'a WorldSpec, pose: Pose },
}

impl Predictor<'_> {
    /// Predicts all candidates' futures; the learned path is a single
    /// batched model call.
    pub fn predict(
        &self,
        ctx: &Observation,
        waypoints: &[ActionSequence],
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Vec<Observation>>, PlanError> {
        match self {
            Predictor::Learned(model) => {
                let requests: Vec<SampleRequest> =
                    waypoints.iter().map(|w| SampleRequest { ctx, actions: w }).collect();
                Ok(sample_multistep_batch(model, &requests, 1, rng)?)
            }
            Predictor::Oracle { world, pose } => Ok(waypoints
                .iter()
                .map(|seq| {
                    seq.0
                        .iter()
                        .map(|wp| {
                            let p = pose.compose(&Pose { x: wp[0], y: wp[1], phi: wp[2] });
                            render(world, &p).unwrap_or_else(|_| render_blocked_view())
                        })
                        .collect()
                })
                .collect()),
        }
    }
}

/// Plans from the current observation toward `goal`, using the builtin
/// scorer for language goals.
pub fn cem_plan(
    ctx: &Observation,
    goal: &GoalSpec,
    predictor: &Predictor,
    cfg: &PlanConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PlanResult, PlanError> {
    cem_plan_with_scorer(ctx, goal, predictor, &mut LanguageScorer::Builtin, cfg, rng)
}

/// Full-control variant: language goals are scored by `lang`, which may be
/// an external process.
pub fn cem_plan_with_scorer(
    ctx: &Observation,
    goal: &GoalSpec,
    predictor: &Predictor,
    lang: &mut LanguageScorer,
    cfg: &PlanConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PlanResult, PlanError> {
    cfg.validate()?;
    if let Predictor::Learned(model) = predictor {
        if model.config.k != cfg.horizon {
            return Err(PlanError::Contract(format!(
                "model predicts {} frames but the planning horizon is {}",
                model.config.k, cfg.horizon
            )));
        }
    }
    let initial = match cfg.init {
        InitMode::Anchors => {
            let anchors = default_anchors(cfg.horizon).0;
            if anchors.len() != cfg.samples {
                return Err(PlanError::Contract(format!(
                    "anchor grid has {} entries but sample size is {}; build a matching grid with make_anchors",
                    anchors.len(),
                    cfg.samples
                )));
            }
            anchors
        }
        InitMode::RandomGaussian => random_candidates(cfg.samples, cfg.horizon, rng),
    };
    // Prediction noise draws from a stream split off the planning RNG so
    // the CEM resampling sequence is independent of the predictor kind.
    let mut model_rng = ChaCha12Rng::seed_from_u64(rng.random());
    cem_optimize(cfg, initial, rng, |_cands, wps| {
        let futures = predictor.predict(ctx, wps, &mut model_rng)?;
        futures
            .iter()
            .zip(wps)
            .map(|(frames, wp)| match goal {
                GoalSpec::Point { x, y } => {
                    Ok(score_point_goal(frames, &wp.0, *x, *y, cfg.lambda1, cfg.lambda2))
                }
                GoalSpec::Image(target) => Ok(score_image_goal(frames, target)),
                GoalSpec::Language(text) => lang.score(frames, text),
            })
            .collect()
    })
}
