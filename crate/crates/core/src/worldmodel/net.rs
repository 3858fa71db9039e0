//! The velocity-field network.
//!
//! A two-level U-Net over per-frame 8×8 latents. Every level block applies,
//! in order: a film-conditioned residual convolution block, frame-wise
//! spatial self-attention, cross-attention from each frame's tokens to the
//! waypoint embedding, and windowed temporal attention that lets tokens of
//! one spatial region exchange information across all K frames. The
//! context latent is channel-concatenated onto every frame's input, and the
//! flow time `t`, step size `d`, and frame index enter through sinusoidal
//! features mapped to per-frame film coefficients. All K frames are
//! predicted by a single forward pass.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ndgrad::{NdError, Tape, Tensor, TensorId};

use super::config::ModelConfig;
use super::patchify::{LATENT_C, LATENT_SIDE};
use super::WmError;

/// Group-norm epsilon used throughout the network.
pub const GN_EPS: f32 = 1e-5;
/// Sinusoidal bands per conditioning scalar (t, d, frame index).
const COND_BANDS: usize = 8;
/// Conditioning feature width before the MLP: 3 scalars × 2·bands.
const COND_IN: usize = 3 * 2 * COND_BANDS;

/// `K` relative waypoints `(x, y, φ)` in the context frame's coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence(pub Vec<[f32; 3]>);

impl ActionSequence {
    /// Encodes waypoints as `(x, y, cos φ, sin φ)` rows — the `(N, 4)`
    /// input of the waypoint MLP.
    pub fn encode(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.0.len() * 4);
        for w in &self.0 {
            out.extend_from_slice(&[w[0], w[1], w[2].cos(), w[2].sin()]);
        }
        out
    }
}

/// Handles to the parameters of one attached forward graph.
pub struct ParamIds(BTreeMap<String, TensorId>);

impl ParamIds {
    fn get(&self, name: &str) -> TensorId {
        *self.0.get(name).unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Tape id of a named parameter; panics if the name is unknown.
    pub fn id(&self, name: &str) -> TensorId {
        self.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.0.iter().map(|(n, id)| (n, *id))
    }
}

/// Inputs of one batched forward pass.
///
/// Frames are flattened sample-major: row `b·K + k` of `noisy` and
/// `actions` belongs to sample `b`, frame `k`. `t` and `d` hold one value
/// per sample.
pub struct ForwardInput<'a> {
    pub noisy: &'a Tensor,
    pub ctx: &'a Tensor,
    pub actions: &'a Tensor,
    pub t: &'a [f32],
    pub d: &'a [f32],
}

/// The world model: configuration, named parameters, and a forward-pass
/// counter used to assert the one-step inference contract.
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    forward_count: AtomicU64,
    sequence_count: AtomicU64,
}

impl Model {
    /// Initializes parameters deterministically from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self, WmError> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Self { config, params, forward_count: AtomicU64::new(0), sequence_count: AtomicU64::new(0) })
    }

    /// Wraps existing parameters (e.g. from a checkpoint), verifying that
    /// every expected parameter is present with the config's shape.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self, WmError> {
        config.validate()?;
        let expected = init_params(&config);
        if expected.len() != params.len() {
            return Err(WmError::Checkpoint(format!(
                "parameter table has {} entries, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, t) in &expected {
            let got = params
                .get(name)
                .ok_or_else(|| WmError::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(WmError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut params = params;
        for t in params.values_mut() {
            t.requires_grad = true;
        }
        Ok(Self { config, params, forward_count: AtomicU64::new(0), sequence_count: AtomicU64::new(0) })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Forward passes run since construction or the last reset. A batched
    /// call counts once regardless of batch size.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// Sequences pushed through the network since the last reset; a batched
    /// call over B candidate futures adds B.
    pub fn sequence_count(&self) -> u64 {
        self.sequence_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
        self.sequence_count.store(0, Ordering::Relaxed);
    }

    /// Registers every parameter on the tape.
    pub fn attach(&self, tape: &mut Tape) -> ParamIds {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), tape.leaf(t.clone()));
        }
        ParamIds(ids)
    }

    /// Embeds one action sequence, returning the `[N, E]` token matrix that
    /// conditions spatial attention.
    pub fn embed_action(&self, seq: &ActionSequence) -> Result<Tensor, WmError> {
        if seq.0.len() != self.config.k {
            return Err(WmError::Shape(format!(
                "action sequence has {} waypoints, model expects {}",
                seq.0.len(),
                self.config.k
            )));
        }
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let pids = self.attach(&mut tape);
        let enc = Tensor::from_vec(&[self.config.k, 4], seq.encode())?;
        let enc = tape.leaf(enc);
        let emb = self.action_tokens(&mut tape, &pids, enc, 1)?;
        let value = tape.value(emb).clone().into_shape(&[self.config.k, self.config.action_dim])?;
        Ok(value)
    }

    /// One batched forward pass producing per-frame velocity latents
    /// `[B·K, 64, 8, 8]` from plain input tensors.
    pub fn forward(&self, tape: &mut Tape, pids: &ParamIds, input: &ForwardInput) -> Result<TensorId, WmError> {
        let noisy = tape.leaf(input.noisy.clone());
        let ctx = tape.leaf(input.ctx.clone());
        let actions = tape.leaf(input.actions.clone());
        self.forward_ids(tape, pids, noisy, ctx, actions, input.t, input.d)
    }

    /// Forward pass over values already on the tape; used by the training
    /// objective where the noisy input is itself a computed node.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_ids(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        noisy: TensorId,
        ctx: TensorId,
        actions: TensorId,
        t: &[f32],
        d: &[f32],
    ) -> Result<TensorId, WmError> {
        let k = self.config.k;
        let b = tape.value(ctx).shape().first().copied().unwrap_or(0);
        let expect_noisy = [b * k, LATENT_C, LATENT_SIDE, LATENT_SIDE];
        if tape.value(noisy).shape() != expect_noisy {
            return Err(WmError::Shape(format!(
                "noisy latents have shape {:?}, want {:?}",
                tape.value(noisy).shape(),
                expect_noisy
            )));
        }
        if tape.value(ctx).shape() != [b, LATENT_C, LATENT_SIDE, LATENT_SIDE] {
            return Err(WmError::Shape(format!("context latents have shape {:?}", tape.value(ctx).shape())));
        }
        if tape.value(actions).shape() != [b * k, 4] {
            return Err(WmError::Shape(format!(
                "encoded actions have shape {:?}, want [{}, 4]",
                tape.value(actions).shape(),
                b * k
            )));
        }
        if t.len() != b || d.len() != b {
            return Err(WmError::Shape(format!("t/d carry {}/{} values for batch {b}", t.len(), d.len())));
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        self.sequence_count.fetch_add(b as u64, Ordering::Relaxed);
        let w0 = self.config.width;
        let w1 = 2 * w0;

        // Conditioning and action tokens.
        let cond = self.cond_vector(tape, pids, t, d)?;
        let aemb = self.action_tokens(tape, pids, actions, b)?;

        // Input assembly: per-frame concat of noisy latent and context.
        let ctx_rep = tape.repeat_leading(ctx, k)?;
        let x = tape.concat(noisy, ctx_rep, 1)?;
        let h = self.conv(tape, pids, "conv_in", x, 1, 1)?;

        let h0 = self.level_block(tape, pids, "down", h, w0, w0, cond, aemb, b)?;
        let hd = self.conv(tape, pids, "down_sample", h0, 2, 1)?;
        let h1 = self.level_block(tape, pids, "mid", hd, w1, w1, cond, aemb, b)?;
        let hu = tape.upsample_nearest2(h1)?;
        let hu = self.conv(tape, pids, "up_sample", hu, 1, 1)?;
        let hc = tape.concat(hu, h0, 1)?;
        let h2 = self.level_block(tape, pids, "up", hc, 2 * w0, w0, cond, aemb, b)?;

        let gn_g = pids.get("out.gn.g");
        let gn_b = pids.get("out.gn.b");
        let o = tape.group_norm(h2, gn_g, gn_b, self.config.groups, GN_EPS)?;
        let o = tape.silu(o)?;
        let out = self.conv(tape, pids, "out.conv", o, 1, 1)?;
        Ok(out)
    }

    // ---- submodules ----

    fn conv(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        name: &str,
        x: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, NdError> {
        tape.conv2d(x, pids.get(&format!("{name}.w")), pids.get(&format!("{name}.b")), stride, pad)
    }

    fn linear(&self, tape: &mut Tape, pids: &ParamIds, name: &str, x: TensorId) -> Result<TensorId, NdError> {
        let y = tape.matmul(x, pids.get(&format!("{name}.w")))?;
        tape.add_bias(y, pids.get(&format!("{name}.b")))
    }

    /// Sinusoidal features of (t, d, frame) through a 2-layer MLP, one row
    /// per frame slot.
    fn cond_vector(&self, tape: &mut Tape, pids: &ParamIds, t: &[f32], d: &[f32]) -> Result<TensorId, WmError> {
        let k = self.config.k;
        let mut rows = Vec::with_capacity(t.len() * k * COND_IN);
        for b in 0..t.len() {
            for f in 0..k {
                push_sinusoidal(&mut rows, t[b]);
                push_sinusoidal(&mut rows, d[b]);
                push_sinusoidal(&mut rows, f as f32 / k as f32);
            }
        }
        let feats = tape.leaf(Tensor::from_vec(&[t.len() * k, COND_IN], rows)?);
        let h = self.linear(tape, pids, "cond.l1", feats)?;
        let h = tape.silu(h)?;
        Ok(self.linear(tape, pids, "cond.l2", h)?)
    }

    /// Waypoint rows through the 4-layer MLP plus a fixed sinusoidal
    /// position code per slot, reshaped to `[B, K, E]`.
    fn action_tokens(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        encoded: TensorId,
        b: usize,
    ) -> Result<TensorId, WmError> {
        let (k, e) = (self.config.k, self.config.action_dim);
        let mut h = encoded;
        for (i, layer) in ["act.l1", "act.l2", "act.l3", "act.l4"].iter().enumerate() {
            h = self.linear(tape, pids, layer, h)?;
            if i < 3 {
                h = tape.silu(h)?;
            }
        }
        let mut pos = Vec::with_capacity(b * k * e);
        for _ in 0..b {
            for n in 0..k {
                for i in 0..e / 2 {
                    let freq = 1.0 / 10_000f32.powf(2.0 * i as f32 / e as f32);
                    pos.push((n as f32 * freq).sin());
                    pos.push((n as f32 * freq).cos());
                }
            }
        }
        let pos = tape.leaf(Tensor::from_vec(&[b * k, e], pos)?);
        let h = tape.add(h, pos)?;
        Ok(tape.reshape(h, &[b, k, e])?)
    }

    /// One U-Net level: film-conditioned residual block, spatial
    /// self-attention, action cross-attention, windowed temporal attention.
    #[allow(clippy::too_many_arguments)]
    fn level_block(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        prefix: &str,
        x: TensorId,
        cin: usize,
        cout: usize,
        cond: TensorId,
        aemb: TensorId,
        b: usize,
    ) -> Result<TensorId, WmError> {
        let h = self.res_block(tape, pids, &format!("{prefix}.res"), x, cin, cout, cond)?;
        let h = self.spatial_self_attention(tape, pids, &format!("{prefix}.satt"), h)?;
        let h = self.action_cross_attention(tape, pids, &format!("{prefix}.xatt"), h, aemb, b)?;
        let h = self.temporal_attention(tape, pids, &format!("{prefix}.tatt"), h, b)?;
        Ok(h)
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        p: &str,
        x: TensorId,
        cin: usize,
        cout: usize,
        cond: TensorId,
    ) -> Result<TensorId, WmError> {
        let g = self.config.groups;
        let h = tape.group_norm(x, pids.get(&format!("{p}.gn1.g")), pids.get(&format!("{p}.gn1.b")), g, GN_EPS)?;
        let h = tape.silu(h)?;
        let h = self.conv(tape, pids, &format!("{p}.conv1"), h, 1, 1)?;
        let scale = self.linear(tape, pids, &format!("{p}.film_s"), cond)?;
        let shift = self.linear(tape, pids, &format!("{p}.film_b"), cond)?;
        let h = tape.group_norm(h, pids.get(&format!("{p}.gn2.g")), pids.get(&format!("{p}.gn2.b")), g, GN_EPS)?;
        let h = tape.film(h, scale, shift)?;
        let h = tape.silu(h)?;
        let h = self.conv(tape, pids, &format!("{p}.conv2"), h, 1, 1)?;
        let skip = if cin == cout { x } else { self.conv(tape, pids, &format!("{p}.skip"), x, 1, 0)? };
        Ok(tape.add(h, skip)?)
    }

    /// Tokens of each frame attend within that frame.
    fn spatial_self_attention(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        p: &str,
        x: TensorId,
    ) -> Result<TensorId, WmError> {
        let shape = tape.value(x).shape().to_vec();
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = self.config.heads;
        let g = self.config.groups;
        let nm = tape.group_norm(x, pids.get(&format!("{p}.gn.g")), pids.get(&format!("{p}.gn.b")), g, GN_EPS)?;
        let tok = tape.reshape(nm, &[n, c, hh * ww])?;
        let tok = tape.permute(tok, &[0, 2, 1])?;
        let flat = tape.reshape(tok, &[n * hh * ww, c])?;
        let q = self.linear(tape, pids, &format!("{p}.q"), flat)?;
        let kk = self.linear(tape, pids, &format!("{p}.k"), flat)?;
        let v = self.linear(tape, pids, &format!("{p}.v"), flat)?;
        let q = split_heads(tape, q, n, hh * ww, c, heads)?;
        let kk = split_heads(tape, kk, n, hh * ww, c, heads)?;
        let v = split_heads(tape, v, n, hh * ww, c, heads)?;
        let o = tape.attention(q, kk, v)?;
        let o = merge_heads(tape, o, n, hh * ww, c, heads)?;
        let o = tape.reshape(o, &[n * hh * ww, c])?;
        let o = self.linear(tape, pids, &format!("{p}.proj"), o)?;
        let o = tape.reshape(o, &[n, hh * ww, c])?;
        let o = tape.permute(o, &[0, 2, 1])?;
        let o = tape.reshape(o, &[n, c, hh, ww])?;
        Ok(tape.add(x, o)?)
    }

    /// Tokens of each frame query the action embedding.
    #[allow(clippy::too_many_arguments)]
    fn action_cross_attention(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        p: &str,
        x: TensorId,
        aemb: TensorId,
        b: usize,
    ) -> Result<TensorId, WmError> {
        let shape = tape.value(x).shape().to_vec();
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let k_frames = self.config.k;
        let nw = self.config.k; // one action token per future frame
        let e = self.config.action_dim;
        let heads = self.config.heads;
        let g = self.config.groups;
        let nm = tape.group_norm(x, pids.get(&format!("{p}.gn.g")), pids.get(&format!("{p}.gn.b")), g, GN_EPS)?;
        let tok = tape.reshape(nm, &[n, c, hh * ww])?;
        let tok = tape.permute(tok, &[0, 2, 1])?;
        let flat = tape.reshape(tok, &[n * hh * ww, c])?;
        let q = self.linear(tape, pids, &format!("{p}.q"), flat)?;
        let q = split_heads(tape, q, n, hh * ww, c, heads)?;
        let aflat = tape.reshape(aemb, &[b * nw, e])?;
        let kk = self.linear(tape, pids, &format!("{p}.k"), aflat)?;
        let v = self.linear(tape, pids, &format!("{p}.v"), aflat)?;
        let kk = tape.reshape(kk, &[b, nw, c])?;
        let v = tape.reshape(v, &[b, nw, c])?;
        let kk = tape.repeat_leading(kk, k_frames)?;
        let v = tape.repeat_leading(v, k_frames)?;
        let kk = split_heads(tape, kk, n, nw, c, heads)?;
        let v = split_heads(tape, v, n, nw, c, heads)?;
        let o = tape.attention(q, kk, v)?;
        let o = merge_heads(tape, o, n, hh * ww, c, heads)?;
        let o = tape.reshape(o, &[n * hh * ww, c])?;
        let o = self.linear(tape, pids, &format!("{p}.proj"), o)?;
        let o = tape.reshape(o, &[n, hh * ww, c])?;
        let o = tape.permute(o, &[0, 2, 1])?;
        let o = tape.reshape(o, &[n, c, hh, ww])?;
        Ok(tape.add(x, o)?)
    }

    /// Tokens attend across all K frames within their spatial window. The
    /// effective partition never exceeds the level's grid side, so the
    /// coarse level of a `window = 8` model degrades to per-cell temporal
    /// attention rather than failing.
    fn temporal_attention(
        &self,
        tape: &mut Tape,
        pids: &ParamIds,
        p: &str,
        x: TensorId,
        b: usize,
    ) -> Result<TensorId, WmError> {
        let shape = tape.value(x).shape().to_vec();
        let (_, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let k = self.config.k;
        let m = self.config.window.min(hh);
        let heads = self.config.heads;
        let g = self.config.groups;
        let nm = tape.group_norm(x, pids.get(&format!("{p}.gn.g")), pids.get(&format!("{p}.gn.b")), g, GN_EPS)?;
        let t5 = tape.reshape(nm, &[b, k, c, hh, ww])?;
        let t5 = tape.permute(t5, &[0, 1, 3, 4, 2])?; // [B,K,H,W,C]
        let win = window_partition(tape, t5, m)?;
        let rows = b * m * m;
        let tokens = k * (hh / m) * (ww / m);
        let flat = tape.reshape(win, &[rows * tokens, c])?;
        let q = self.linear(tape, pids, &format!("{p}.q"), flat)?;
        let kk = self.linear(tape, pids, &format!("{p}.k"), flat)?;
        let v = self.linear(tape, pids, &format!("{p}.v"), flat)?;
        let q = split_heads(tape, q, rows, tokens, c, heads)?;
        let kk = split_heads(tape, kk, rows, tokens, c, heads)?;
        let v = split_heads(tape, v, rows, tokens, c, heads)?;
        let o = tape.attention(q, kk, v)?;
        let o = merge_heads(tape, o, rows, tokens, c, heads)?;
        let o = tape.reshape(o, &[rows * tokens, c])?;
        let o = self.linear(tape, pids, &format!("{p}.proj"), o)?;
        let o = tape.reshape(o, &[rows, tokens, c])?;
        let o = window_merge(tape, o, b, k, hh, ww, m)?;
        let o = tape.permute(o, &[0, 1, 4, 2, 3])?; // [B,K,C,H,W]
        let o = tape.reshape(o, &[b * k, c, hh, ww])?;
        Ok(tape.add(x, o)?)
    }
}

/// Groups `[B, K, H, W, C]` tokens into `m²` windows per sample:
/// `[B·m², K·(H/m)·(W/m), C]`. Each window holds one spatial region's
/// tokens from all K frames.
pub fn window_partition(tape: &mut Tape, x: TensorId, m: usize) -> Result<TensorId, NdError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 5 || s[2] % m != 0 || s[3] % m != 0 {
        return Err(NdError::ShapeMismatch {
            op: "window_partition",
            detail: format!("tokens {s:?} with window {m}"),
        });
    }
    let (b, k, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    let r = tape.reshape(x, &[b, k, m, h / m, m, w / m, c])?;
    let p = tape.permute(r, &[0, 2, 4, 1, 3, 5, 6])?;
    tape.reshape(p, &[b * m * m, k * (h / m) * (w / m), c])
}

/// Inverse of [`window_partition`].
pub fn window_merge(
    tape: &mut Tape,
    x: TensorId,
    b: usize,
    k: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Result<TensorId, NdError> {
    let r = tape.reshape(x, &[b, m, m, k, h / m, w / m, *tape.value(x).shape().last().unwrap()])?;
    let p = tape.permute(r, &[0, 3, 1, 4, 2, 5, 6])?;
    let c = *tape.value(p).shape().last().unwrap();
    tape.reshape(p, &[b, k, h, w, c])
}

fn split_heads(tape: &mut Tape, x: TensorId, r: usize, t: usize, c: usize, h: usize) -> Result<TensorId, NdError> {
    let x = tape.reshape(x, &[r, t, h, c / h])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[r * h, t, c / h])
}

fn merge_heads(tape: &mut Tape, x: TensorId, r: usize, t: usize, c: usize, h: usize) -> Result<TensorId, NdError> {
    let x = tape.reshape(x, &[r, h, t, c / h])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[r, t, c])
}

fn push_sinusoidal(out: &mut Vec<f32>, x: f32) {
    for band in 0..COND_BANDS {
        let f = (1u32 << band) as f32 * std::f32::consts::PI;
        out.push((f * x).sin());
        out.push((f * x).cos());
    }
}

// ---- initialization ----

struct ParamBuilder {
    rng: ChaCha12Rng,
    map: BTreeMap<String, Tensor>,
}

impl ParamBuilder {
    fn randn(&mut self, shape: &[usize], std: f32) -> Tensor {
        let normal = Normal::new(0.0f32, std).expect("std finite");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("sized").with_grad()
    }

    fn conv(&mut self, name: &str, o: usize, i: usize, ksz: usize, zero: bool) {
        let fan_in = (i * ksz * ksz) as f32;
        let w = if zero {
            Tensor::zeros(&[o, i, ksz, ksz]).with_grad()
        } else {
            self.randn(&[o, i, ksz, ksz], (2.0 / fan_in).sqrt())
        };
        self.map.insert(format!("{name}.w"), w);
        self.map.insert(format!("{name}.b"), Tensor::zeros(&[o]).with_grad());
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, zero: bool) {
        let w = if zero {
            Tensor::zeros(&[i, o]).with_grad()
        } else {
            self.randn(&[i, o], (1.0 / i as f32).sqrt())
        };
        self.map.insert(format!("{name}.w"), w);
        self.map.insert(format!("{name}.b"), Tensor::zeros(&[o]).with_grad());
    }

    fn gn(&mut self, name: &str, c: usize) {
        self.map.insert(format!("{name}.g"), Tensor::full(&[c], 1.0).with_grad());
        self.map.insert(format!("{name}.b"), Tensor::zeros(&[c]).with_grad());
    }
}

/// Builds the full parameter table in a fixed creation order so that
/// initialization is a pure function of the seed.
fn init_params(cfg: &ModelConfig) -> BTreeMap<String, Tensor> {
    let mut b = ParamBuilder {
        rng: ChaCha12Rng::seed_from_u64(cfg.init_seed ^ 0x6d6f_64656c_5f69),
        map: BTreeMap::new(),
    };
    let (w0, w1) = (cfg.width, 2 * cfg.width);
    let (e, dc) = (cfg.action_dim, cfg.cond_dim);

    b.conv("conv_in", w0, 2 * LATENT_C, 3, false);
    b.linear("cond.l1", COND_IN, dc, false);
    b.linear("cond.l2", dc, dc, false);
    b.linear("act.l1", 4, e, false);
    b.linear("act.l2", e, e, false);
    b.linear("act.l3", e, e, false);
    b.linear("act.l4", e, e, false);

    let level = |b: &mut ParamBuilder, prefix: &str, cin: usize, cout: usize| {
        let p = format!("{prefix}.res");
        b.gn(&format!("{p}.gn1"), cin);
        b.conv(&format!("{p}.conv1"), cout, cin, 3, false);
        b.linear(&format!("{p}.film_s"), dc, cout, true);
        b.linear(&format!("{p}.film_b"), dc, cout, true);
        b.gn(&format!("{p}.gn2"), cout);
        b.conv(&format!("{p}.conv2"), cout, cout, 3, true);
        if cin != cout {
            b.conv(&format!("{p}.skip"), cout, cin, 1, false);
        }
        for att in ["satt", "tatt"] {
            let p = format!("{prefix}.{att}");
            b.gn(&format!("{p}.gn"), cout);
            b.linear(&format!("{p}.q"), cout, cout, false);
            b.linear(&format!("{p}.k"), cout, cout, false);
            b.linear(&format!("{p}.v"), cout, cout, false);
            b.linear(&format!("{p}.proj"), cout, cout, true);
        }
        let p = format!("{prefix}.xatt");
        b.gn(&format!("{p}.gn"), cout);
        b.linear(&format!("{p}.q"), cout, cout, false);
        b.linear(&format!("{p}.k"), e, cout, false);
        b.linear(&format!("{p}.v"), e, cout, false);
        b.linear(&format!("{p}.proj"), cout, cout, true);
    };

    level(&mut b, "down", w0, w0);
    b.conv("down_sample", w1, w0, 3, false);
    level(&mut b, "mid", w1, w1);
    b.conv("up_sample", w0, w1, 3, false);
    level(&mut b, "up", 2 * w0, w0);
    b.gn("out.gn", w0);
    b.conv("out.conv", LATENT_C, w0, 3, true);
    b.map
}
