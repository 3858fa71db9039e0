//! Tensors, a tape-based reverse-mode autodiff engine, and Adam.
//!
//! The engine is deliberately small: dense `f32` tensors, eager ops recorded
//! on a [`Tape`], and fused kernels for the handful of layers the world
//! model needs (convolution, group norm, attention, film modulation). All
//! kernels are single-threaded and deterministic: the same inputs produce
//! bit-identical outputs on every run.

mod adam;
#[cfg(test)]
mod grad_checks;
pub mod linalg;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction, tape ops, and serialization.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("{op}: incompatible shapes ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("tape misuse: {0}")]
    Tape(String),
    #[error("malformed tensor data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Central-difference gradient of a scalar function, used as an independent
/// oracle for the tape's reverse pass.
///
/// Each coordinate is perturbed by ±`eps` around `x` and the function value
/// difference is divided by `2·eps`. The function is treated as a black box,
/// so this never touches the autodiff path it is checking.
pub fn numerical_grad(mut f: impl FnMut(&[f32]) -> f32, x: &[f32], eps: f32) -> Vec<f32> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with denominators floored at 1 to keep
/// near-zero entries meaningful.
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f32::max)
}
