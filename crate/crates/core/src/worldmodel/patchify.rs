//! Invertible space-to-depth latent transform.
//!
//! Observations are folded 4×4-patch-wise into channel depth: `[4, 32, 32]`
//! becomes `[64, 8, 8]`. The mapping is a pure index rearrangement, so it is
//! exactly invertible and requires no learned weights; the generative model
//! works entirely in this latent space.

use crate::navsim::{Observation, IMG, OBS_CHANNELS};
use crate::ndgrad::Tensor;

use super::WmError;

/// Patch side length.
pub const PATCH: usize = 4;
/// Latent grid side: 32 / 4.
pub const LATENT_SIDE: usize = IMG / PATCH;
/// Latent channels: 4 · 4².
pub const LATENT_C: usize = OBS_CHANNELS * PATCH * PATCH;
/// Elements in one latent frame.
pub const LATENT_LEN: usize = LATENT_C * LATENT_SIDE * LATENT_SIDE;

/// Folds an observation into its latent: latent channel `c·16 + py·4 + px`
/// at grid cell `(gy, gx)` holds image pixel `(c, gy·4+py, gx·4+px)`.
pub fn patchify(obs: &Observation) -> Tensor {
    let src = obs.data.data();
    let mut out = vec![0.0f32; LATENT_LEN];
    patchify_into(src, &mut out);
    Tensor::from_vec(&[LATENT_C, LATENT_SIDE, LATENT_SIDE], out).expect("sized")
}

/// Raw-slice patchify for batch assembly; `src` is one `[4,32,32]` frame,
/// `dst` one `[64,8,8]` latent.
pub fn patchify_into(src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), OBS_CHANNELS * IMG * IMG);
    debug_assert_eq!(dst.len(), LATENT_LEN);
    for c in 0..OBS_CHANNELS {
        for py in 0..PATCH {
            for px in 0..PATCH {
                let lc = (c * PATCH + py) * PATCH + px;
                for gy in 0..LATENT_SIDE {
                    let iy = gy * PATCH + py;
                    for gx in 0..LATENT_SIDE {
                        let ix = gx * PATCH + px;
                        dst[(lc * LATENT_SIDE + gy) * LATENT_SIDE + gx] = src[(c * IMG + iy) * IMG + ix];
                    }
                }
            }
        }
    }
}

/// Unfolds a latent back into an observation; exact inverse of [`patchify`].
pub fn unpatchify(latent: &Tensor) -> Result<Observation, WmError> {
    if latent.shape() != [LATENT_C, LATENT_SIDE, LATENT_SIDE] {
        return Err(WmError::Shape(format!(
            "latent has shape {:?}, want [{LATENT_C}, {LATENT_SIDE}, {LATENT_SIDE}]",
            latent.shape()
        )));
    }
    let mut out = vec![0.0f32; OBS_CHANNELS * IMG * IMG];
    unpatchify_into(latent.data(), &mut out);
    let t = Tensor::from_vec(&[OBS_CHANNELS, IMG, IMG], out).expect("sized");
    Ok(Observation::from_tensor(t).expect("shape fixed"))
}

/// Raw-slice unpatchify; inverse of [`patchify_into`].
pub fn unpatchify_into(src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), LATENT_LEN);
    debug_assert_eq!(dst.len(), OBS_CHANNELS * IMG * IMG);
    for c in 0..OBS_CHANNELS {
        for py in 0..PATCH {
            for px in 0..PATCH {
                let lc = (c * PATCH + py) * PATCH + px;
                for gy in 0..LATENT_SIDE {
                    let iy = gy * PATCH + py;
                    for gx in 0..LATENT_SIDE {
                        let ix = gx * PATCH + px;
                        dst[(c * IMG + iy) * IMG + ix] = src[(lc * LATENT_SIDE + gy) * LATENT_SIDE + gx];
                    }
                }
            }
        }
    }
}
