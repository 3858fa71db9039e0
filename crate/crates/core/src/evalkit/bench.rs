//! Latency structure: batched versus sequential candidate evaluation, and
//! forward-pass accounting.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::navsim::{generate_world, render, Family, Pose};
use crate::planner::{cem_plan, default_anchors, rollout_unicycle, GoalSpec, PlanConfig, Predictor, PLAN_DT};
use crate::worldmodel::{sample_multistep_batch, sample_onestep, ActionSequence, Model, SampleRequest};

use super::EvalError;

/// Median timings and instrumentation counts for candidate evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Candidates evaluated per batch.
    pub candidates: usize,
    /// Median seconds for one batched forward over all candidates.
    pub batched_s: f64,
    /// Median seconds for the same candidates predicted one at a time.
    pub sequential_s: f64,
    /// `sequential_s / batched_s`.
    pub speedup: f64,
    /// Forward passes for a single K-frame prediction; the one-step
    /// contract makes this 1.
    pub forwards_per_prediction: u64,
    /// Candidate sequences pushed through the model by one full planning
    /// call: samples × iterations.
    pub sequences_per_plan: u64,
    pub trials: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Measures one batched `candidates`-wide prediction against the same
/// predictions made sequentially, reporting medians over `trials` rounds
/// (at least 20) after a warmup round, plus the forward-count
/// instrumentation behind the one-step and batching contracts.
pub fn bench_latency(model: &Model, candidates: usize, trials: usize, seed: u64) -> Result<LatencyReport, EvalError> {
    if candidates == 0 {
        return Err(EvalError::Contract("candidate count must be positive".into()));
    }
    let trials = trials.max(20);
    let world = generate_world(Family::Empty, seed)?;
    let pose = Pose::new(world.width / 2.0, world.height / 2.0, 0.0);
    let ctx = render(&world, &pose)?;
    let k = model.config.k;
    let anchors = default_anchors(k).0;
    let plans: Vec<ActionSequence> = (0..candidates)
        .map(|i| rollout_unicycle(&anchors[i % anchors.len()], PLAN_DT))
        .collect();
    let requests: Vec<SampleRequest> = plans.iter().map(|a| SampleRequest { ctx: &ctx, actions: a }).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Warmup both paths once so allocation and cache effects settle.
    sample_multistep_batch(model, &requests, 1, &mut rng)?;
    sample_onestep(model, &ctx, &plans[0], &mut rng)?;

    let mut batched = Vec::with_capacity(trials);
    let mut sequential = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        sample_multistep_batch(model, &requests, 1, &mut rng)?;
        batched.push(t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        for plan in &plans {
            sample_onestep(model, &ctx, plan, &mut rng)?;
        }
        sequential.push(t0.elapsed().as_secs_f64());
    }

    model.reset_forward_count();
    sample_onestep(model, &ctx, &plans[0], &mut rng)?;
    let forwards_per_prediction = model.forward_count();

    // A full planning call at the default configuration, counted at the
    // candidate-sequence level.
    let cfg = PlanConfig { horizon: k, ..PlanConfig::default() };
    model.reset_forward_count();
    cem_plan(&ctx, &GoalSpec::Point { x: 1.0, y: 0.0 }, &Predictor::Learned(model), &cfg, &mut rng)?;
    let sequences_per_plan = model.sequence_count();

    let batched_s = median(batched);
    let sequential_s = median(sequential);
    Ok(LatencyReport {
        candidates,
        batched_s,
        sequential_s,
        speedup: sequential_s / batched_s,
        forwards_per_prediction,
        sequences_per_plan,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::ModelConfig;

    #[test]
    fn report_counts_match_the_contracts() {
        let cfg = ModelConfig { k: 4, width: 8, heads: 2, action_dim: 16, cond_dim: 32, ..ModelConfig::default() };
        let model = Model::new(cfg).unwrap();
        let report = bench_latency(&model, 32, 20, 3).unwrap();
        assert_eq!(report.forwards_per_prediction, 1);
        assert_eq!(report.sequences_per_plan, 32 * 5);
        assert!(report.batched_s > 0.0 && report.sequential_s > 0.0);
        assert!(report.speedup > 0.0);
        assert_eq!(report.trials, 20);
    }

    #[test]
    fn zero_candidates_is_rejected() {
        let cfg = ModelConfig { k: 4, width: 8, heads: 2, action_dim: 16, cond_dim: 32, ..ModelConfig::default() };
        let model = Model::new(cfg).unwrap();
        assert!(bench_latency(&model, 0, 20, 1).is_err());
    }
}
