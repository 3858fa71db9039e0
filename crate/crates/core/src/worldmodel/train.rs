//! Optimizing the model against the shortcut objective.
//!
//! The loop draws fresh batches from recorded trajectories, backpropagates
//! the loss, and applies Adam updates. A held-out slice of trajectories
//! drives a fixed validation batch, checkpoints land every epoch (a fixed
//! number of steps), and a non-finite loss aborts with a diagnostic rather
//! than silently continuing.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::navsim::Trajectory;
use crate::ndgrad::{Adam, AdamConfig, Tape};

use super::checkpoint::{params_hash, save_model};
use super::config::ModelConfig;
use super::net::Model;
use super::shortcut::{make_batch, shortcut_loss, ShortcutBatch, TargetMode};
use super::WmError;

/// Knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps to run.
    pub steps: u64,
    /// Samples per batch.
    pub batch: usize,
    /// Adam learning rate.
    pub lr: f32,
    /// Seed for batch sampling and noise; everything else follows from it.
    pub seed: u64,
    /// Steps per epoch; an epoch boundary writes a checkpoint.
    pub steps_per_epoch: u64,
    /// Trajectories held out (from the end of the dataset) for validation.
    pub val_trajs: usize,
    /// Where epoch checkpoints go; none disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    /// Log the running loss every this many steps; 0 disables.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 3e-4,
            seed: 0,
            steps_per_epoch: 250,
            val_trajs: 2,
            checkpoint_dir: None,
            log_every: 50,
        }
    }
}

/// What a training run did, in numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Mean loss over the last up-to-50 steps.
    pub final_train_loss: f32,
    /// Loss on the fixed validation batch before the first update.
    pub initial_val_loss: Option<f32>,
    /// Same batch after the last update.
    pub final_val_loss: Option<f32>,
    pub param_count: usize,
    pub duration_s: f64,
}

/// Reports from the two stages of [`pretrain_finetune`], plus the identity
/// of the base model the finetune started from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainFinetuneReport {
    pub pretrain: TrainReport,
    pub finetune: TrainReport,
    /// Content hash of the pretrained checkpoint the finetune continued.
    pub base_checkpoint: String,
}

fn eval_batch(model: &Model, batch: &ShortcutBatch) -> Result<f32, WmError> {
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let pids = model.attach(&mut tape);
    let loss = shortcut_loss(model, &mut tape, &pids, batch, TargetMode::NoGrad)?;
    Ok(tape.value(loss).data()[0])
}

/// Runs the optimization loop, mutating `model` in place.
pub fn train(model: &mut Model, trajs: &[Trajectory], cfg: &TrainConfig) -> Result<TrainReport, WmError> {
    if trajs.is_empty() {
        return Err(WmError::Contract("training dataset is empty".into()));
    }
    let start = std::time::Instant::now();
    let held = cfg.val_trajs.min(trajs.len().saturating_sub(1));
    let (train_split, val_split) = trajs.split_at(trajs.len() - held);

    // One fixed validation batch, independent of the training stream.
    let val_batch = if val_split.is_empty() {
        None
    } else {
        let mut vrng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x76616c5f62617463);
        Some(make_batch(&model.config, val_split, cfg.batch.max(8), &mut vrng)?)
    };
    let initial_val_loss = val_batch.as_ref().map(|b| eval_batch(model, b)).transpose()?;

    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut recent = std::collections::VecDeque::with_capacity(50);
    for step in 0..cfg.steps {
        let batch = make_batch(&model.config, train_split, cfg.batch, &mut rng)?;
        let mut tape = Tape::new();
        let pids = model.attach(&mut tape);
        let loss = shortcut_loss(model, &mut tape, &pids, &batch, TargetMode::NoGrad)?;
        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Err(WmError::NonFinite { step });
        }
        tape.backward(loss)?;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, id) in pids.iter() {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        opt.step(&mut model.params, &grads)?;
        if recent.len() == 50 {
            recent.pop_front();
        }
        recent.push_back(loss_val);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let mean: f32 = recent.iter().sum::<f32>() / recent.len() as f32;
            log::info!("step {:>6}  loss {loss_val:.5}  mean{} {mean:.5}", step + 1, recent.len());
        }
        let epoch_end = (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps;
        if epoch_end {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let epoch = (step + 1).div_ceil(cfg.steps_per_epoch);
                save_model(&dir.join(format!("epoch_{epoch:04}.nwm")), model)?;
            }
        }
    }
    let final_val_loss = val_batch.as_ref().map(|b| eval_batch(model, b)).transpose()?;
    let final_train_loss = if recent.is_empty() {
        f32::NAN
    } else {
        recent.iter().sum::<f32>() / recent.len() as f32
    };
    Ok(TrainReport {
        steps: cfg.steps,
        final_train_loss,
        initial_val_loss,
        final_val_loss,
        param_count: model.param_count(),
        duration_s: start.elapsed().as_secs_f64(),
    })
}

/// Trains a fresh model on a broad dataset, then continues on the target
/// dataset at a tenth of the learning rate. `fine_steps` bounds the second
/// stage; zero leaves the pretrained model untouched.
pub fn pretrain_finetune(
    mcfg: &ModelConfig,
    pretrain_set: &[Trajectory],
    finetune_set: &[Trajectory],
    cfg: &TrainConfig,
    fine_steps: u64,
) -> Result<(Model, PretrainFinetuneReport), WmError> {
    let mut model = Model::new(mcfg.clone())?;
    let pretrain = train(&mut model, pretrain_set, cfg)?;
    let base_checkpoint = params_hash(&model)?;
    let fine_cfg = TrainConfig {
        steps: fine_steps,
        lr: cfg.lr * 0.1,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let finetune = train(&mut model, finetune_set, &fine_cfg)?;
    Ok((model, PretrainFinetuneReport { pretrain, finetune, base_checkpoint }))
}
