//! One-step generative world model over observation latents.
//!
//! Observations are packed losslessly into 8×8 latent grids, and a
//! velocity-field network learns to map noise to the K future latents of a
//! trajectory segment in a single forward pass. Training interpolates
//! between noise and data, regressing either the straight flow direction
//! or, for larger step sizes, the average of two chained half-steps so
//! that big jumps stay consistent with small ones.

mod checkpoint;
mod config;
mod net;
mod patchify;
mod sample;
mod shortcut;
mod train;

pub use checkpoint::{load_model, load_tensors, params_hash, save_model, save_tensors};
pub use config::ModelConfig;
pub use net::{
    window_merge, window_partition, ActionSequence, ForwardInput, Model, ParamIds, GN_EPS,
};
pub use patchify::{patchify, unpatchify, LATENT_C, LATENT_LEN, LATENT_SIDE, PATCH};
pub use sample::{sample_multistep, sample_multistep_batch, sample_onestep, SampleRequest};
pub use shortcut::{make_batch, shortcut_loss, ShortcutBatch, TargetMode};
pub use train::{pretrain_finetune, train, PretrainFinetuneReport, TrainConfig, TrainReport};

use crate::navsim::SimError;
use crate::ndgrad::NdError;

/// Errors from model construction, training, and sampling.
#[derive(Debug, thiserror::Error)]
pub enum WmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("training contract violated: {0}")]
    Contract(String),
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: u64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
