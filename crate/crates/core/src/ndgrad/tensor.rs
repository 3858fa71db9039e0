//! Dense tensor value type and its on-disk encoding.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use super::NdError;

/// A dense row-major `f32` tensor.
///
/// `grad` is populated for `requires_grad` tensors by
/// [`Tape::backward`](super::Tape::backward); it holds the accumulated
/// gradient in the same row-major layout as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor from explicit contents; fails when the element count
    /// does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, NdError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NdError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Standard-normal samples drawn in row-major order from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self, NdError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NdError::ShapeMismatch {
                op: "into_shape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Serializes as little-endian `u64` rank, `u64` dims, then row-major
    /// `f32` data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a tensor written by [`Tensor::write_to`].
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NdError> {
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(NdError::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = read_u64(r)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| NdError::Format("tensor dims overflow".into()))?;
            shape.push(d);
        }
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NdError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
