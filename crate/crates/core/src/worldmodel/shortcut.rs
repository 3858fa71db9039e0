//! Training objective: flow matching with self-consistent shortcuts.
//!
//! Each sample interpolates between a noise draw `s⁰` and the data `s¹` at
//! a flow time `t`, and the network predicts a velocity for step size `d`.
//! Small steps (`d = d_min`) regress the straight direction `s¹ − s⁰`;
//! larger steps regress the average of two chained half-steps predicted by
//! the network itself, with no gradient through the target. A model that
//! satisfies both is consistent across step sizes, so a single `d = 1`
//! step from pure noise lands on the data distribution.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::navsim::{relative_waypoint, sample_instance_indices, Trajectory};
use crate::ndgrad::{Tape, Tensor, TensorId};

use super::config::ModelConfig;
use super::net::{Model, ParamIds};
use super::patchify::{patchify_into, LATENT_LEN};
use super::WmError;

/// One training batch. Rows are sample-major (`b·K + k`), samples are
/// ordered flow-branch first so each branch is a contiguous row range; the
/// branch of a sample is independent of its content, so the ordering
/// carries no information.
#[derive(Debug, Clone)]
pub struct ShortcutBatch {
    /// Context latents `[B, 64, 8, 8]`.
    pub ctx: Tensor,
    /// Future-frame latents `s¹`, `[B·K, 64, 8, 8]`.
    pub future: Tensor,
    /// Noise draws `s⁰`, `[B·K, 64, 8, 8]`.
    pub noise: Tensor,
    /// Encoded waypoints `[B·K, 4]`.
    pub actions: Tensor,
    /// Flow time per sample; always an integer multiple of `d`.
    pub t: Vec<f32>,
    /// Step size per sample; `d_min` on the flow branch.
    pub d: Vec<f32>,
    /// Samples `flow_count..` take the bootstrap branch.
    pub flow_count: usize,
}

impl ShortcutBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Checks the invariants the objective relies on: grid-aligned `t`,
    /// power-of-two `d` within the configured range, `t + d ≤ 1`, and
    /// consistent tensor shapes.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), WmError> {
        let b = self.len();
        if self.d.len() != b || self.flow_count > b {
            return Err(WmError::Contract("batch field lengths disagree".into()));
        }
        let rows = b * cfg.k;
        for (name, tensor, want) in [
            ("ctx", &self.ctx, vec![b, 64, 8, 8]),
            ("future", &self.future, vec![rows, 64, 8, 8]),
            ("noise", &self.noise, vec![rows, 64, 8, 8]),
            ("actions", &self.actions, vec![rows, 4]),
        ] {
            if tensor.shape() != want {
                return Err(WmError::Shape(format!("{name} has shape {:?}, want {:?}", tensor.shape(), want)));
            }
        }
        for i in 0..b {
            let (t, d) = (self.t[i], self.d[i]);
            let inv = 1.0 / d;
            let steps = inv.round();
            if d <= 0.0 || (inv - steps).abs() > 1e-4 || !(steps as u64).is_power_of_two() {
                return Err(WmError::Contract(format!("d={d} is not a reciprocal power of two")));
            }
            if d < cfg.d_min() - 1e-6 {
                return Err(WmError::Contract(format!("d={d} below d_min={}", cfg.d_min())));
            }
            let j = t / d;
            if t < 0.0 || (j - j.round()).abs() > 1e-4 {
                return Err(WmError::Contract(format!("t={t} is not a multiple of d={d}")));
            }
            if t + d > 1.0 + 1e-6 {
                return Err(WmError::Contract(format!("t+d = {} exceeds 1", t + d)));
            }
            if i < self.flow_count && (d - cfg.d_min()).abs() > 1e-6 {
                return Err(WmError::Contract(format!("flow sample {i} has d={d}, want d_min")));
            }
        }
        Ok(())
    }

    /// The interpolant `s^(t) = (1−t)·s⁰ + t·s¹`, rows `start..end`.
    fn interpolant_rows(&self, k: usize, start: usize, end: usize) -> Tensor {
        let mut out = Vec::with_capacity((end - start) * k * LATENT_LEN);
        let noise = self.noise.data();
        let future = self.future.data();
        for b in start..end {
            let t = self.t[b];
            let lo = b * k * LATENT_LEN;
            let hi = (b + 1) * k * LATENT_LEN;
            out.extend(noise[lo..hi].iter().zip(&future[lo..hi]).map(|(n, f)| (1.0 - t) * n + t * f));
        }
        Tensor::from_vec(&[(end - start) * k, 64, 8, 8], out).expect("sized")
    }
}

/// Extracts rows `start..end` along the leading axis.
fn rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::from_vec(&shape, t.data()[start * stride..end * stride].to_vec()).expect("sized")
}

/// Draws a training batch from recorded trajectories: roughly ¾ flow
/// samples at `d_min` and ¼ bootstrap samples at larger step sizes.
pub fn make_batch(
    cfg: &ModelConfig,
    trajs: &[Trajectory],
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<ShortcutBatch, WmError> {
    if batch == 0 {
        return Err(WmError::Contract("batch size must be positive".into()));
    }
    let eligible: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= cfg.k + 2).collect();
    if eligible.is_empty() {
        return Err(WmError::Contract(format!(
            "no trajectory long enough for K={} (need {} frames)",
            cfg.k,
            cfg.k + 2
        )));
    }
    let boot_count = if cfg.halvings == 0 { 0 } else { batch / 4 };
    let flow_count = batch - boot_count;
    let d_min = cfg.d_min();

    let mut ctx = Vec::with_capacity(batch * LATENT_LEN);
    let mut future = Vec::with_capacity(batch * cfg.k * LATENT_LEN);
    let mut actions = Vec::with_capacity(batch * cfg.k * 4);
    let mut t = Vec::with_capacity(batch);
    let mut d = Vec::with_capacity(batch);

    let append_latent = |dst: &mut Vec<f32>, frame: &Tensor| {
        let start = dst.len();
        dst.resize(start + LATENT_LEN, 0.0);
        patchify_into(frame.data(), &mut dst[start..]);
    };
    for s in 0..batch {
        let traj = eligible[rng.random_range(0..eligible.len())];
        let (i, futures) = sample_instance_indices(traj.len(), cfg.k, rng)?;
        append_latent(&mut ctx, &traj.observations[i].data);
        for &j in &futures {
            append_latent(&mut future, &traj.observations[j].data);
            let w = relative_waypoint(&traj.poses[i], &traj.poses[j]);
            actions.extend_from_slice(&[w[0], w[1], w[2].cos(), w[2].sin()]);
        }
        if s < flow_count {
            let j = rng.random_range(0..1u32 << cfg.halvings);
            t.push(j as f32 * d_min);
            d.push(d_min);
        } else {
            let m = rng.random_range(0..cfg.halvings);
            let step = 0.5f32.powi(m as i32);
            let j = rng.random_range(0..1u32 << m);
            t.push(j as f32 * step);
            d.push(step);
        }
    }

    let mut noise = Vec::with_capacity(batch * cfg.k * LATENT_LEN);
    for _ in 0..batch * cfg.k * LATENT_LEN {
        noise.push(rng.sample::<f32, _>(rand_distr::StandardNormal));
    }
    let batch = ShortcutBatch {
        ctx: Tensor::from_vec(&[batch, 64, 8, 8], ctx)?,
        future: Tensor::from_vec(&[batch * cfg.k, 64, 8, 8], future)?,
        noise: Tensor::from_vec(&[batch * cfg.k, 64, 8, 8], noise)?,
        actions: Tensor::from_vec(&[batch * cfg.k, 4], actions)?,
        t,
        d,
        flow_count,
    };
    batch.validate(cfg)?;
    Ok(batch)
}

/// How bootstrap targets are shielded from the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Run the two half-step forwards with recording disabled (default).
    NoGrad,
    /// Record them, then cut the graph with an explicit detach. Same values
    /// and same gradients; exists to make the stop-gradient testable.
    OnTapeDetached,
}

/// Builds the loss graph for one batch and returns the scalar node:
/// mean squared error between the predicted velocities and the per-branch
/// targets. The main prediction for all samples costs one forward pass.
pub fn shortcut_loss(
    model: &Model,
    tape: &mut Tape,
    pids: &ParamIds,
    batch: &ShortcutBatch,
    mode: TargetMode,
) -> Result<TensorId, WmError> {
    let cfg = &model.config;
    batch.validate(cfg)?;
    let b = batch.len();
    let k = cfg.k;
    let (bf, bb) = (batch.flow_count, b - batch.flow_count);

    let st = tape.leaf(batch.interpolant_rows(k, 0, b));
    let ctx = tape.leaf(batch.ctx.clone());
    let acts = tape.leaf(batch.actions.clone());
    let pred = model.forward_ids(tape, pids, st, ctx, acts, &batch.t, &batch.d)?;

    // Flow targets are plain data: s¹ − s⁰ on the flow rows.
    let flow_target = {
        let n = bf * k * LATENT_LEN;
        let data: Vec<f32> =
            batch.future.data()[..n].iter().zip(&batch.noise.data()[..n]).map(|(f, z)| f - z).collect();
        Tensor::from_vec(&[bf * k, 64, 8, 8], data)?
    };
    let flow_target = tape.leaf(flow_target);

    let target = if bb == 0 {
        flow_target
    } else {
        // Bootstrap targets: two chained half-steps on the tail sub-batch,
        // averaged, without gradient flow.
        let was = tape.grad_enabled();
        if mode == TargetMode::NoGrad {
            tape.set_grad_enabled(false);
        }
        let st_sub = tape.leaf(batch.interpolant_rows(k, bf, b));
        let ctx_sub = tape.leaf(rows(&batch.ctx, bf, b));
        let act_sub = tape.leaf(rows(&batch.actions, bf * k, b * k));
        let t_sub = &batch.t[bf..];
        let half: Vec<f32> = batch.d[bf..].iter().map(|d| d / 2.0).collect();
        let t_mid: Vec<f32> = t_sub.iter().zip(&half).map(|(t, h)| t + h).collect();
        let v1 = model.forward_ids(tape, pids, st_sub, ctx_sub, act_sub, t_sub, &half)?;
        let mut row_half = Vec::with_capacity(bb * k);
        for h in &half {
            row_half.extend(std::iter::repeat(*h).take(k));
        }
        let step = tape.scale_rows(v1, &row_half)?;
        let s_mid = tape.add(st_sub, step)?;
        let v2 = model.forward_ids(tape, pids, s_mid, ctx_sub, act_sub, &t_mid, &half)?;
        let sum = tape.add(v1, v2)?;
        let mut boot_target = tape.scale(sum, 0.5)?;
        if mode == TargetMode::NoGrad {
            tape.set_grad_enabled(was);
        } else {
            boot_target = tape.detach(boot_target);
        }
        if bf == 0 {
            boot_target
        } else {
            tape.concat(flow_target, boot_target, 0)?
        }
    };
    Ok(tape.mse(pred, target)?)
}
