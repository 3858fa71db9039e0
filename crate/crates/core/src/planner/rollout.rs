//! Candidate action generation: control sequences, kinematic rollouts, and
//! the fixed anchor library that seeds the optimizer.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::navsim::{integrate_arc, Pose, DT, OMEGA_MAX, V_MAX};
use crate::worldmodel::ActionSequence;

/// `N` unicycle control pairs `(v, ω)`, clamped to the dynamics bounds on
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence(pub Vec<(f32, f32)>);

impl ControlSequence {
    pub fn new(pairs: Vec<(f32, f32)>) -> Self {
        Self(pairs.into_iter().map(|(v, w)| (v.clamp(0.0, V_MAX), w.clamp(-OMEGA_MAX, OMEGA_MAX))).collect())
    }

    pub fn constant(v: f32, w: f32, n: usize) -> Self {
        Self::new(vec![(v, w); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Flattens to the `2N` optimization vector `(v₀, ω₀, v₁, ω₁, …)`.
    pub fn as_flat(&self) -> Vec<f32> {
        self.0.iter().flat_map(|&(v, w)| [v, w]).collect()
    }

    pub fn from_flat(flat: &[f32]) -> Self {
        Self::new(flat.chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }
}

/// Integrates a control sequence from the origin with exact arcs; waypoint
/// `i` is the relative pose after `i+1` steps of `dt` seconds.
pub fn rollout_unicycle(controls: &ControlSequence, dt: f32) -> ActionSequence {
    let mut pose = Pose { x: 0.0, y: 0.0, phi: 0.0 };
    let mut waypoints = Vec::with_capacity(controls.len());
    for &(v, w) in &controls.0 {
        pose = integrate_arc(&pose, v, w, dt);
        waypoints.push([pose.x, pose.y, pose.phi]);
    }
    ActionSequence(waypoints)
}

/// The fixed candidate library: every combination of a linear speed and a
/// turn rate, held constant over the horizon.
#[derive(Debug, Clone)]
pub struct AnchorSet(pub Vec<ControlSequence>);

/// Builds the Cartesian product of constant controls.
pub fn make_anchors(v_set: &[f32], w_set: &[f32], n: usize) -> AnchorSet {
    let mut out = Vec::with_capacity(v_set.len() * w_set.len());
    for &v in v_set {
        for &w in w_set {
            out.push(ControlSequence::constant(v, w, n));
        }
    }
    AnchorSet(out)
}

/// The default 4×8 grid: speeds at ¼..1 of `v_max`, turn rates evenly
/// spaced across `[−ω_max, ω_max]` — 32 anchors, matching the sample size.
pub fn default_anchors(n: usize) -> AnchorSet {
    let v_set: Vec<f32> = (1..=4).map(|i| V_MAX * i as f32 / 4.0).collect();
    let w_set: Vec<f32> = (0..8).map(|i| -OMEGA_MAX + 2.0 * OMEGA_MAX * i as f32 / 7.0).collect();
    make_anchors(&v_set, &w_set, n)
}

/// A size-matched random baseline: per-dimension Gaussian controls centered
/// mid-range with σ half the range, clamped. This is what anchor
/// initialization is measured against.
pub fn random_candidates(count: usize, n: usize, rng: &mut ChaCha12Rng) -> Vec<ControlSequence> {
    (0..count)
        .map(|_| {
            ControlSequence::new(
                (0..n)
                    .map(|_| {
                        let v = V_MAX / 2.0 + V_MAX / 2.0 * rng.sample::<f32, _>(rand_distr::StandardNormal);
                        let w = OMEGA_MAX / 2.0 * rng.sample::<f32, _>(rand_distr::StandardNormal);
                        (v, w)
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Mean pairwise Euclidean distance among the terminal waypoints of a
/// candidate set — the coverage statistic anchors are chosen to maximize.
pub fn terminal_spread(candidates: &[ControlSequence], dt: f32) -> f32 {
    let terms: Vec<[f32; 2]> = candidates
        .iter()
        .map(|c| {
            let wps = rollout_unicycle(c, dt);
            let last = wps.0.last().copied().unwrap_or([0.0; 3]);
            [last[0], last[1]]
        })
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0u32;
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            sum += ((terms[i][0] - terms[j][0]).powi(2) + (terms[i][1] - terms[j][1]).powi(2)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f32
    }
}

/// Dynamics step period used by planning rollouts.
pub const PLAN_DT: f32 = DT;
