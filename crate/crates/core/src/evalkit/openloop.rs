//! Open-loop generation evaluation: one-step predictions against held-out
//! ground-truth futures, with a copy-context baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::navsim::{sample_training_instance, Trajectory};
use crate::worldmodel::{sample_onestep, ActionSequence, Model};

use super::metrics::{psnr, ssim};
use super::EvalError;

/// Aggregated generation quality over a set of held-out instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEvalReport {
    /// Mean PSNR of predicted frame `j` against ground truth, `j = 0..K`.
    pub psnr_per_frame: Vec<f32>,
    /// Mean SSIM per predicted frame.
    pub ssim_per_frame: Vec<f32>,
    pub mean_psnr: f32,
    pub mean_ssim: f32,
    /// The "predict the context frame for every future" baseline on the
    /// same instances; any useful model must beat it.
    pub baseline_psnr: f32,
    pub baseline_ssim: f32,
    /// `(trajectory seed, context frame)` identifying each instance.
    pub instances: Vec<(u64, usize)>,
}

/// Scores `count` one-step predictions drawn from held-out trajectories.
/// Instances cycle through the trajectories in order; everything is a
/// deterministic function of `seed`.
pub fn run_open_loop(
    model: &Model,
    heldout: &[Trajectory],
    count: usize,
    seed: u64,
) -> Result<GenEvalReport, EvalError> {
    if heldout.is_empty() || count == 0 {
        return Err(EvalError::Contract("open-loop evaluation needs trajectories and a positive instance count".into()));
    }
    let k = model.config.k;
    if let Some(short) = heldout.iter().find(|t| t.len() < k + 2) {
        return Err(EvalError::Contract(format!(
            "held-out trajectory of {} steps is too short for K = {k}",
            short.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut psnr_acc = vec![0.0f64; k];
    let mut ssim_acc = vec![0.0f64; k];
    let mut base_psnr = 0.0f64;
    let mut base_ssim = 0.0f64;
    let mut instances = Vec::with_capacity(count);

    for i in 0..count {
        let traj = &heldout[i % heldout.len()];
        let inst = sample_training_instance(traj, k, &mut rng)?;
        let ctx = &traj.observations[inst.ctx_idx];
        let actions = ActionSequence(inst.actions.clone());
        let predicted = sample_onestep(model, ctx, &actions, &mut rng)?;
        for (j, pred) in predicted.iter().enumerate() {
            let truth = &traj.observations[inst.future_idx[j]];
            psnr_acc[j] += psnr(pred, truth) as f64;
            ssim_acc[j] += ssim(pred, truth) as f64;
            base_psnr += psnr(ctx, truth) as f64;
            base_ssim += ssim(ctx, truth) as f64;
        }
        instances.push((traj.seed, inst.ctx_idx));
    }

    let n = count as f64;
    let psnr_per_frame: Vec<f32> = psnr_acc.iter().map(|&v| (v / n) as f32).collect();
    let ssim_per_frame: Vec<f32> = ssim_acc.iter().map(|&v| (v / n) as f32).collect();
    Ok(GenEvalReport {
        mean_psnr: (psnr_acc.iter().sum::<f64>() / (n * k as f64)) as f32,
        mean_ssim: (ssim_acc.iter().sum::<f64>() / (n * k as f64)) as f32,
        baseline_psnr: (base_psnr / (n * k as f64)) as f32,
        baseline_ssim: (base_ssim / (n * k as f64)) as f32,
        psnr_per_frame,
        ssim_per_frame,
        instances,
    })
}
