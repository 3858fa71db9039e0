//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use super::patchify::{LATENT_C, LATENT_SIDE};
use super::WmError;

/// Architecture and objective constants for the one-step world model.
///
/// The latent geometry (8×8 grid, 64 channels) is fixed by the invertible
/// patchify transform; everything else is configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of future frames predicted per forward pass.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Base channel width of the U-Net (doubled at the coarse level).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Attention heads in every attention block.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Temporal attention partitions the latent grid into `window × window`
    /// spatial regions; tokens attend within their region across frames.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Width of the action embedding produced by the waypoint MLP.
    #[serde(default = "default_action_dim")]
    pub action_dim: usize,
    /// Width of the (t, d, frame) conditioning vector.
    #[serde(default = "default_cond_dim")]
    pub cond_dim: usize,
    /// Channels per normalization group.
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Number of step-size halvings: the smallest shortcut step is
    /// `d_min = 2^-halvings`.
    #[serde(default = "default_halvings")]
    pub halvings: usize,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_k() -> usize {
    8
}
fn default_width() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_window() -> usize {
    2
}
fn default_action_dim() -> usize {
    64
}
fn default_cond_dim() -> usize {
    128
}
fn default_groups() -> usize {
    8
}
fn default_halvings() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            width: default_width(),
            heads: default_heads(),
            window: default_window(),
            action_dim: default_action_dim(),
            cond_dim: default_cond_dim(),
            groups: default_groups(),
            halvings: default_halvings(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest shortcut step size.
    pub fn d_min(&self) -> f32 {
        0.5f32.powi(self.halvings as i32)
    }

    /// Latent tensor shape per frame.
    pub fn latent_shape(&self) -> [usize; 3] {
        [LATENT_C, LATENT_SIDE, LATENT_SIDE]
    }

    pub fn validate(&self) -> Result<(), WmError> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(WmError::Config(what.to_string()))
            }
        };
        check(self.k >= 1, "k must be at least 1")?;
        check(self.width >= self.groups && self.width % self.groups == 0, "width must be a positive multiple of groups")?;
        check((2 * self.width) % self.groups == 0, "2·width must be divisible by groups")?;
        check(self.heads >= 1 && self.width % self.heads == 0, "width must be divisible by heads")?;
        check((2 * self.width) % self.heads == 0, "2·width must be divisible by heads")?;
        check(self.window >= 1 && LATENT_SIDE % self.window == 0, "window must divide the latent grid side")?;
        check(self.action_dim % self.heads == 0, "action_dim must be divisible by heads")?;
        check(self.cond_dim >= 8, "cond_dim too small")?;
        check(self.halvings >= 1 && self.halvings <= 8, "halvings must be in 1..=8")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().d_min(), 0.125);
    }

    #[test]
    fn invalid_divisibility_is_rejected() {
        let bad = ModelConfig { width: 30, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { window: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
