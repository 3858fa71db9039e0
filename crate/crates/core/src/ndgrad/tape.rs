//! Reverse-mode autodiff over a linear tape of operations.
//!
//! Ops execute eagerly and append a record; [`Tape::backward`] walks the
//! records in reverse, accumulating gradients into every `requires_grad`
//! leaf. There is no implicit broadcasting: elementwise ops demand equal
//! shapes, and the few broadcast patterns the models need (bias rows,
//! per-channel film, leading-dim repeats) are explicit ops with hand-written
//! adjoints. While gradient recording is disabled (see
//! [`Tape::set_grad_enabled`]) ops still compute values but record plain
//! leaves, so nothing done in that window can receive gradient.

use super::linalg::{col2im_acc, conv_out_hw, im2col, mm_nn, mm_nn_acc, mm_nt_acc, mm_tn_acc};
use super::{NdError, Tensor};

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddScalar(TensorId),
    ScaleRows(TensorId, Vec<f32>),
    AddBias { x: TensorId, bias: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, bias: TensorId, stride: usize, pad: usize },
    GroupNorm { x: TensorId, gain: TensorId, bias: TensorId, groups: usize, eps: f32 },
    Film { x: TensorId, scale: TensorId, shift: TensorId },
    Silu(TensorId),
    SoftmaxLast(TensorId),
    Attention { q: TensorId, k: TensorId, v: TensorId },
    Reshape(TensorId),
    Permute { x: TensorId, axes: Vec<usize> },
    Concat { a: TensorId, b: TensorId, axis: usize },
    RepeatLeading { x: TensorId, times: usize },
    UpsampleNearest2(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    Mse { pred: TensorId, target: TensorId },
}

#[derive(Debug)]
enum Aux {
    None,
    GroupNorm { mean: Vec<f32>, rstd: Vec<f32> },
    Attention { weights: Vec<f32> },
}

struct Node {
    value: Tensor,
    needs: bool,
    op: Op,
    aux: Aux,
}

/// Records a computation and runs reverse-mode accumulation over it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// Drops all recorded nodes so the tape can host a fresh computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.grad_enabled = true;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Toggles gradient recording; values computed while disabled are
    /// detached from the graph.
    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input value; it participates in gradients iff
    /// `t.requires_grad` and recording is enabled.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf, Aux::None)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`], if one was produced.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, mut value: Tensor, needs: bool, op: Op, aux: Aux) -> TensorId {
        let (needs, op, aux) = if self.grad_enabled {
            (needs, op, aux)
        } else {
            value.requires_grad = false;
            (false, Op::Leaf, Aux::None)
        };
        self.nodes.push(Node { value, needs, op, aux });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs
    }

    fn data(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), NdError> {
        if self.shape(a) != self.shape(b) {
            return Err(NdError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NdError> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let value = Tensor::from_vec(self.shape(a), data).expect("shape checked");
        Ok(self.push(value, self.needs(a) || self.needs(b), Op::Add(a, b), Aux::None))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NdError> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let value = Tensor::from_vec(self.shape(a), data).expect("shape checked");
        Ok(self.push(value, self.needs(a) || self.needs(b), Op::Sub(a, b), Aux::None))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NdError> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let value = Tensor::from_vec(self.shape(a), data).expect("shape checked");
        Ok(self.push(value, self.needs(a) || self.needs(b), Op::Mul(a, b), Aux::None))
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId, NdError> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        Ok(self.push(value, self.needs(x), Op::Scale(x, c), Aux::None))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f32) -> Result<TensorId, NdError> {
        let data = self.data(x).iter().map(|v| v + c).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        Ok(self.push(value, self.needs(x), Op::AddScalar(x), Aux::None))
    }

    /// Scales each slice along the leading dimension by its own factor.
    pub fn scale_rows(&mut self, x: TensorId, factors: &[f32]) -> Result<TensorId, NdError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(NdError::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{} factors for leading dim {:?}", factors.len(), shape.first()),
            });
        }
        let chunk = self.data(x).len() / factors.len().max(1);
        let mut data = self.data(x).to_vec();
        for (i, f) in factors.iter().enumerate() {
            for v in &mut data[i * chunk..(i + 1) * chunk] {
                *v *= f;
            }
        }
        let value = Tensor::from_vec(&shape, data).expect("same shape");
        Ok(self.push(value, self.needs(x), Op::ScaleRows(x, factors.to_vec()), Aux::None))
    }

    /// Adds a 1-D bias along the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, NdError> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(NdError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} vs trailing dim {}", self.shape(bias), cols),
            });
        }
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(&shape, data).expect("same shape");
        Ok(self.push(value, self.needs(x) || self.needs(bias), Op::AddBias { x, bias }, Aux::None))
    }

    // ---- linear algebra ----

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} · {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_vec(&[m, n], out).expect("sized");
        Ok(self.push(value, self.needs(a) || self.needs(b), Op::Matmul { a, b }, Aux::None))
    }

    /// 2-D convolution: `x [N,C,H,W]`, `w [O,C,kh,kw]`, `bias [O]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, NdError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || self.shape(bias) != [sw[0]] {
            return Err(NdError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, bias {:?}", sx, sw, self.shape(bias)),
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = conv_out_hw(h, wd, kh, kw, stride, pad);
        let ckk = c * kh * kw;
        let mut col = vec![0.0; ckk * oh * ow];
        let mut out = vec![0.0; n * o * oh * ow];
        {
            let xd = self.data(x);
            let wd_ = self.data(w);
            let bd = self.data(bias);
            for ni in 0..n {
                im2col(&xd[ni * c * h * wd..(ni + 1) * c * h * wd], &mut col, c, h, wd, kh, kw, stride, pad);
                let dst = &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                mm_nn(wd_, &col, dst, o, ckk, oh * ow);
                for (oc, row) in dst.chunks_exact_mut(oh * ow).enumerate() {
                    let bv = bd[oc];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, o, oh, ow], out).expect("sized");
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(value, needs, Op::Conv2d { x, w, bias, stride, pad }, Aux::None))
    }

    /// Group normalization over `[N,C,H,W]` with per-channel gain and bias.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        groups: usize,
        eps: f32,
    ) -> Result<TensorId, NdError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || groups == 0 || sx[1] % groups != 0 {
            return Err(NdError::ShapeMismatch {
                op: "group_norm",
                detail: format!("x {:?} with {} groups", sx, groups),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(NdError::ShapeMismatch {
                op: "group_norm",
                detail: format!("gain {:?}, bias {:?} for {} channels", self.shape(gain), self.shape(bias), c),
            });
        }
        let cg = c / groups;
        let gsize = cg * h * w;
        let mut mean = vec![0.0f32; n * groups];
        let mut rstd = vec![0.0f32; n * groups];
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let bd = self.data(bias);
            for ni in 0..n {
                for g in 0..groups {
                    let base = ni * c * h * w + g * gsize;
                    let xs = &xd[base..base + gsize];
                    let mut s = 0.0f64;
                    for &v in xs {
                        s += v as f64;
                    }
                    let mu = (s / gsize as f64) as f32;
                    let mut s2 = 0.0f64;
                    for &v in xs {
                        let d = (v - mu) as f64;
                        s2 += d * d;
                    }
                    let var = (s2 / gsize as f64) as f32;
                    let rs = 1.0 / (var + eps).sqrt();
                    mean[ni * groups + g] = mu;
                    rstd[ni * groups + g] = rs;
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let (gv, bv) = (gd[ch], bd[ch]);
                        let src = &xs[ci * h * w..(ci + 1) * h * w];
                        let dst = &mut out[base + ci * h * w..base + (ci + 1) * h * w];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = (v - mu) * rs * gv + bv;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&sx, out).expect("sized");
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            needs,
            Op::GroupNorm { x, gain, bias, groups, eps },
            Aux::GroupNorm { mean, rstd },
        ))
    }

    /// Feature-wise modulation `x·(1+scale) + shift` with per-(sample,
    /// channel) coefficients: `x [N,C,H,W]`, `scale`/`shift [N,C]`.
    pub fn film(&mut self, x: TensorId, scale: TensorId, shift: TensorId) -> Result<TensorId, NdError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(NdError::ShapeMismatch { op: "film", detail: format!("x {sx:?}") });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(scale) != [n, c] || self.shape(shift) != [n, c] {
            return Err(NdError::ShapeMismatch {
                op: "film",
                detail: format!("scale {:?}, shift {:?} for x {:?}", self.shape(scale), self.shape(shift), sx),
            });
        }
        let mut out = vec![0.0f32; n * c * h * w];
        {
            let xd = self.data(x);
            let sd = self.data(scale);
            let hd = self.data(shift);
            for ni in 0..n {
                for ci in 0..c {
                    let (sv, hv) = (1.0 + sd[ni * c + ci], hd[ni * c + ci]);
                    let base = (ni * c + ci) * h * w;
                    for i in 0..h * w {
                        out[base + i] = xd[base + i] * sv + hv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&sx, out).expect("sized");
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(value, needs, Op::Film { x, scale, shift }, Aux::None))
    }

    pub fn silu(&mut self, x: TensorId) -> Result<TensorId, NdError> {
        let data = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::from_vec(self.shape(x), data).expect("same shape");
        Ok(self.push(value, self.needs(x), Op::Silu(x), Aux::None))
    }

    /// Numerically stable softmax along the trailing dimension.
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId, NdError> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(NdError::ShapeMismatch {
            op: "softmax",
            detail: "rank-0 input".into(),
        })?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::from_vec(&shape, data).expect("same shape");
        Ok(self.push(value, self.needs(x), Op::SoftmaxLast(x), Aux::None))
    }

    /// Batched scaled dot-product attention.
    ///
    /// `q [B,T,D]`, `k [B,S,D]`, `v [B,S,D]` -> `[B,T,D]`; the softmax
    /// weights are retained for the backward pass when gradients are needed.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId) -> Result<TensorId, NdError> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let ok = sq.len() == 3
            && sk.len() == 3
            && sv.len() == 3
            && sq[0] == sk[0]
            && sq[0] == sv[0]
            && sq[2] == sk[2]
            && sk[1] == sv[1]
            && sk[2] == sv[2];
        if !ok {
            return Err(NdError::ShapeMismatch {
                op: "attention",
                detail: format!("q {sq:?}, k {sk:?}, v {sv:?}"),
            });
        }
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        let s = sk[1];
        let scale = 1.0 / (d as f32).sqrt();
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let mut weights = vec![0.0f32; if needs { b * t * s } else { 0 }];
        let mut out = vec![0.0f32; b * t * d];
        {
            let qd = self.data(q);
            let kd = self.data(k);
            let vd = self.data(v);
            let mut attn = vec![0.0f32; t * s];
            for bi in 0..b {
                attn.fill(0.0);
                mm_nt_acc(&qd[bi * t * d..(bi + 1) * t * d], &kd[bi * s * d..(bi + 1) * s * d], &mut attn, t, d, s);
                for row in attn.chunks_exact_mut(s) {
                    for v_ in row.iter_mut() {
                        *v_ *= scale;
                    }
                    softmax_row(row);
                }
                mm_nn(
                    &attn,
                    &vd[bi * s * d..(bi + 1) * s * d],
                    &mut out[bi * t * d..(bi + 1) * t * d],
                    t,
                    s,
                    d,
                );
                if needs {
                    weights[bi * t * s..(bi + 1) * t * s].copy_from_slice(&attn);
                }
            }
        }
        let value = Tensor::from_vec(&[b, t, d], out).expect("sized");
        let aux = if needs { Aux::Attention { weights } } else { Aux::None };
        Ok(self.push(value, needs, Op::Attention { q, k, v }, aux))
    }

    // ---- layout ----

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, NdError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(NdError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let value = Tensor::from_vec(shape, self.data(x).to_vec()).expect("counted");
        Ok(self.push(value, self.needs(x), Op::Reshape(x), Aux::None))
    }

    /// Reorders axes, materializing the result contiguously.
    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId, NdError> {
        let shape = self.shape(x).to_vec();
        if !is_permutation(axes, shape.len()) {
            return Err(NdError::ShapeMismatch {
                op: "permute",
                detail: format!("axes {:?} for rank {}", axes, shape.len()),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = vec![0.0f32; self.data(x).len()];
        permute_copy(self.data(x), &mut out, &shape, axes);
        let value = Tensor::from_vec(&out_shape, out).expect("sized");
        Ok(self.push(value, self.needs(x), Op::Permute { x, axes: axes.to_vec() }, Aux::None))
    }

    /// Concatenates two tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId, NdError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(NdError::ShapeMismatch {
                op: "concat",
                detail: format!("{sa:?} ++ {sb:?} along {axis}"),
            });
        }
        let mut out_shape = sa.clone();
        out_shape[axis] += sb[axis];
        let outer: usize = sa[..axis].iter().product();
        let chunk_a: usize = sa[axis..].iter().product();
        let chunk_b: usize = sb[axis..].iter().product();
        let mut out = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        for o in 0..outer {
            out.extend_from_slice(&self.data(a)[o * chunk_a..(o + 1) * chunk_a]);
            out.extend_from_slice(&self.data(b)[o * chunk_b..(o + 1) * chunk_b]);
        }
        let value = Tensor::from_vec(&out_shape, out).expect("sized");
        Ok(self.push(value, self.needs(a) || self.needs(b), Op::Concat { a, b, axis }, Aux::None))
    }

    /// Repeats each leading-dim slice `times` consecutive times:
    /// `[d0, ...] -> [d0·times, ...]`.
    pub fn repeat_leading(&mut self, x: TensorId, times: usize) -> Result<TensorId, NdError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || times == 0 {
            return Err(NdError::ShapeMismatch {
                op: "repeat_leading",
                detail: format!("shape {shape:?} × {times}"),
            });
        }
        let chunk = self.data(x).len() / shape[0];
        let mut out = Vec::with_capacity(self.data(x).len() * times);
        for i in 0..shape[0] {
            for _ in 0..times {
                out.extend_from_slice(&self.data(x)[i * chunk..(i + 1) * chunk]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] *= times;
        let value = Tensor::from_vec(&out_shape, out).expect("sized");
        Ok(self.push(value, self.needs(x), Op::RepeatLeading { x, times }, Aux::None))
    }

    /// Nearest-neighbor ×2 upsampling of `[N,C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: TensorId) -> Result<TensorId, NdError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(NdError::ShapeMismatch { op: "upsample", detail: format!("x {s:?}") });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0f32; n * c * 4 * h * w];
        let xd = self.data(x);
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[y * w + x_];
                    let b = 2 * y * 2 * w + 2 * x_;
                    dst[b] = v;
                    dst[b + 1] = v;
                    dst[b + 2 * w] = v;
                    dst[b + 2 * w + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("sized");
        Ok(self.push(value, self.needs(x), Op::UpsampleNearest2(x), Aux::None))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId, NdError> {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar(s as f32);
        Ok(self.push(value, self.needs(x), Op::SumAll(x), Aux::None))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId, NdError> {
        let n = self.data(x).len().max(1);
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((s / n as f64) as f32);
        Ok(self.push(value, self.needs(x), Op::MeanAll(x), Aux::None))
    }

    /// Mean squared error between equal-shaped tensors, as a scalar node.
    pub fn mse(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId, NdError> {
        self.check_same_shape("mse", pred, target)?;
        let n = self.data(pred).len().max(1);
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let value = Tensor::scalar((s / n as f64) as f32);
        Ok(self.push(value, self.needs(pred) || self.needs(target), Op::Mse { pred, target }, Aux::None))
    }

    /// Copies a value into a fresh leaf that never receives gradient.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let mut t = self.nodes[x.0].value.clone();
        t.requires_grad = false;
        t.grad = None;
        self.push(t, false, Op::Leaf, Aux::None)
    }

    // ---- reverse pass ----

    /// Runs reverse accumulation from a scalar loss.
    ///
    /// Afterwards every `requires_grad` leaf carries its gradient (zeros if
    /// the leaf does not influence the loss). The tape is consumed: a second
    /// call errors until [`Tape::reset`].
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NdError> {
        if self.consumed {
            return Err(NdError::Tape("backward already ran on this tape; call reset first".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NdError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].value.requires_grad {
                grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.value.requires_grad {
                let numel = node.value.numel();
                node.value.grad = Some(grads[i].take().unwrap_or_else(|| vec![0.0; numel]));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        // Helper closures cannot borrow self mutably while nodes are read, so
        // gradient accumulation goes through explicit indices.
        macro_rules! acc {
            ($id:expr, $f:expr) => {{
                let id: TensorId = $id;
                if self.nodes[id.0].needs {
                    let numel = self.nodes[id.0].value.numel();
                    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.as_mut_slice());
                }
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |d: &mut [f32]| add_into(d, g));
                acc!(b, |d: &mut [f32]| add_into(d, g));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |d: &mut [f32]| add_into(d, g));
                acc!(b, |d: &mut [f32]| sub_into(d, g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc!(a, |d: &mut [f32]| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(self.nodes[b.0].value.data()) {
                        *dv += gv * bv;
                    }
                });
                acc!(b, |d: &mut [f32]| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(self.nodes[a.0].value.data()) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                acc!(x, |d: &mut [f32]| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                });
            }
            Op::AddScalar(x) => {
                let x = *x;
                acc!(x, |d: &mut [f32]| add_into(d, g));
            }
            Op::ScaleRows(x, factors) => {
                let x = *x;
                let factors = factors.clone();
                let chunk = g.len() / factors.len();
                acc!(x, |d: &mut [f32]| {
                    for (i, f) in factors.iter().enumerate() {
                        for (dv, gv) in d[i * chunk..(i + 1) * chunk].iter_mut().zip(&g[i * chunk..(i + 1) * chunk]) {
                            *dv += gv * f;
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                acc!(x, |d: &mut [f32]| add_into(d, g));
                let cols = self.nodes[bias.0].value.numel();
                acc!(bias, |d: &mut [f32]| {
                    for row in g.chunks_exact(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].value.shape()[0];
                let k = self.nodes[a.0].value.shape()[1];
                let n = self.nodes[b.0].value.shape()[1];
                acc!(a, |d: &mut [f32]| {
                    mm_nt_acc(g, self.nodes[b.0].value.data(), d, m, n, k);
                });
                acc!(b, |d: &mut [f32]| {
                    mm_tn_acc(self.nodes[a.0].value.data(), g, d, k, m, n);
                });
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let (x, w, bias, stride, pad) = (*x, *w, *bias, *stride, *pad);
                self.conv2d_backward(x, w, bias, stride, pad, g, grads);
            }
            Op::GroupNorm { x, gain, bias, groups, eps } => {
                let (x, gain, bias, groups, eps) = (*x, *gain, *bias, *groups, *eps);
                self.group_norm_backward(i, x, gain, bias, groups, eps, g, grads);
            }
            Op::Film { x, scale, shift } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                acc!(x, |d: &mut [f32]| {
                    let sd = self.nodes[scale.0].value.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            let sv = 1.0 + sd[ni * c + ci];
                            let base = (ni * c + ci) * hw;
                            for j in 0..hw {
                                d[base + j] += g[base + j] * sv;
                            }
                        }
                    }
                });
                acc!(scale, |d: &mut [f32]| {
                    let xd = self.nodes[x.0].value.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = 0.0f32;
                            for j in 0..hw {
                                s += g[base + j] * xd[base + j];
                            }
                            d[ni * c + ci] += s;
                        }
                    }
                });
                acc!(shift, |d: &mut [f32]| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = 0.0f32;
                            for j in 0..hw {
                                s += g[base + j];
                            }
                            d[ni * c + ci] += s;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let x = *x;
                acc!(x, |d: &mut [f32]| {
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(self.nodes[x.0].value.data()) {
                        let s = sigmoid(xv);
                        *dv += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let x = *x;
                let cols = *self.nodes[i].value.shape().last().unwrap();
                acc!(x, |d: &mut [f32]| {
                    let y = self.nodes[i].value.data();
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v } => {
                let (q, k, v) = (*q, *k, *v);
                self.attention_backward(i, q, k, v, g, grads);
            }
            Op::Reshape(x) => {
                let x = *x;
                acc!(x, |d: &mut [f32]| add_into(d, g));
            }
            Op::Permute { x, axes } => {
                let x = *x;
                let axes = axes.clone();
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inv = vec![0usize; axes.len()];
                for (pos, &a) in axes.iter().enumerate() {
                    inv[a] = pos;
                }
                acc!(x, |d: &mut [f32]| {
                    let mut back = vec![0.0f32; g.len()];
                    permute_copy(g, &mut back, &out_shape, &inv);
                    add_into(d, &back);
                });
            }
            Op::Concat { a, b, axis } => {
                let (a, b, axis) = (*a, *b, *axis);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let outer: usize = sa[..axis].iter().product();
                let chunk_a: usize = sa[axis..].iter().product();
                let chunk_b: usize = sb[axis..].iter().product();
                let step = chunk_a + chunk_b;
                acc!(a, |d: &mut [f32]| {
                    for o in 0..outer {
                        add_into(&mut d[o * chunk_a..(o + 1) * chunk_a], &g[o * step..o * step + chunk_a]);
                    }
                });
                acc!(b, |d: &mut [f32]| {
                    for o in 0..outer {
                        add_into(&mut d[o * chunk_b..(o + 1) * chunk_b], &g[o * step + chunk_a..(o + 1) * step]);
                    }
                });
            }
            Op::RepeatLeading { x, times } => {
                let (x, times) = (*x, *times);
                let chunk = self.nodes[x.0].value.numel() / self.nodes[x.0].value.shape()[0];
                let d0 = self.nodes[x.0].value.shape()[0];
                acc!(x, |d: &mut [f32]| {
                    for i0 in 0..d0 {
                        for t in 0..times {
                            let src = &g[(i0 * times + t) * chunk..(i0 * times + t + 1) * chunk];
                            add_into(&mut d[i0 * chunk..(i0 + 1) * chunk], src);
                        }
                    }
                });
            }
            Op::UpsampleNearest2(x) => {
                let x = *x;
                let s = self.nodes[x.0].value.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                acc!(x, |d: &mut [f32]| {
                    for p in 0..n * c {
                        let gsl = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dsl = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for x_ in 0..w {
                                let b = 2 * y * 2 * w + 2 * x_;
                                dsl[y * w + x_] += gsl[b] + gsl[b + 1] + gsl[b + 2 * w] + gsl[b + 2 * w + 1];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let x = *x;
                let gv = g[0];
                acc!(x, |d: &mut [f32]| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let x = *x;
                let gv = g[0] / self.nodes[x.0].value.numel() as f32;
                acc!(x, |d: &mut [f32]| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = self.nodes[pred.0].value.numel() as f32;
                let gv = g[0] * 2.0 / n;
                acc!(pred, |d: &mut [f32]| {
                    let pd = self.nodes[pred.0].value.data();
                    let td = self.nodes[target.0].value.data();
                    for i in 0..d.len() {
                        d[i] += gv * (pd[i] - td[i]);
                    }
                });
                acc!(target, |d: &mut [f32]| {
                    let pd = self.nodes[pred.0].value.data();
                    let td = self.nodes[target.0].value.data();
                    for i in 0..d.len() {
                        d[i] -= gv * (pd[i] - td[i]);
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = conv_out_hw(h, wd, kh, kw, stride, pad);
        let ckk = c * kh * kw;
        let xd = self.nodes[x.0].value.data();
        let wdat = self.nodes[w.0].value.data();
        let need_x = self.nodes[x.0].needs;
        let need_w = self.nodes[w.0].needs;
        let need_b = self.nodes[bias.0].needs;
        let mut col = vec![0.0f32; ckk * oh * ow];
        if need_x {
            let numel = self.nodes[x.0].value.numel();
            let dx = grads[x.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                let go = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                col.fill(0.0);
                mm_tn_acc(wdat, go, &mut col, ckk, o, oh * ow);
                col2im_acc(&col, &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad);
            }
        }
        if need_w {
            let numel = self.nodes[w.0].value.numel();
            let dw = grads[w.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                im2col(&xd[ni * c * h * wd..(ni + 1) * c * h * wd], &mut col, c, h, wd, kh, kw, stride, pad);
                let go = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                mm_nt_acc(go, &col, dw, o, oh * ow, ckk);
            }
        }
        if need_b {
            let numel = self.nodes[bias.0].value.numel();
            let db = grads[bias.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                for oc in 0..o {
                    let go = &g[(ni * o + oc) * oh * ow..(ni * o + oc + 1) * oh * ow];
                    db[oc] += go.iter().sum::<f32>();
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        node: usize,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        groups: usize,
        eps: f32,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let _ = eps;
        let sx = self.nodes[x.0].value.shape().to_vec();
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let cg = c / groups;
        let gsize = cg * h * w;
        let (mean, rstd) = match &self.nodes[node].aux {
            Aux::GroupNorm { mean, rstd } => (mean, rstd),
            _ => unreachable!("group_norm node carries its statistics"),
        };
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data();
        if self.nodes[x.0].needs {
            let numel = self.nodes[x.0].value.numel();
            let dx = grads[x.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * c * h * w + gi * gsize;
                    let (mu, rs) = (mean[ni * groups + gi], rstd[ni * groups + gi]);
                    // dy = g·gain; reduce mean(dy) and mean(dy·xhat) first.
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ci in 0..cg {
                        let gv = gd[gi * cg + ci];
                        for j in 0..h * w {
                            let idx = base + ci * h * w + j;
                            let dy = (g[idx] * gv) as f64;
                            let xh = ((xd[idx] - mu) * rs) as f64;
                            s1 += dy;
                            s2 += dy * xh;
                        }
                    }
                    let m1 = (s1 / gsize as f64) as f32;
                    let m2 = (s2 / gsize as f64) as f32;
                    for ci in 0..cg {
                        let gv = gd[gi * cg + ci];
                        for j in 0..h * w {
                            let idx = base + ci * h * w + j;
                            let dy = g[idx] * gv;
                            let xh = (xd[idx] - mu) * rs;
                            dx[idx] += rs * (dy - m1 - xh * m2);
                        }
                    }
                }
            }
        }
        if self.nodes[gain.0].needs {
            let numel = self.nodes[gain.0].value.numel();
            let dg = grads[gain.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * c * h * w + gi * gsize;
                    let (mu, rs) = (mean[ni * groups + gi], rstd[ni * groups + gi]);
                    for ci in 0..cg {
                        let mut s = 0.0f32;
                        for j in 0..h * w {
                            let idx = base + ci * h * w + j;
                            s += g[idx] * (xd[idx] - mu) * rs;
                        }
                        dg[gi * cg + ci] += s;
                    }
                }
            }
        }
        if self.nodes[bias.0].needs {
            let numel = self.nodes[bias.0].value.numel();
            let db = grads[bias.0].get_or_insert_with(|| vec![0.0; numel]);
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * h * w;
                    db[ch] += g[base..base + h * w].iter().sum::<f32>();
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: usize,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let sq = self.nodes[q.0].value.shape().to_vec();
        let sk = self.nodes[k.0].value.shape().to_vec();
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        let s = sk[1];
        let scale = 1.0 / (d as f32).sqrt();
        let weights = match &self.nodes[node].aux {
            Aux::Attention { weights } => weights,
            _ => unreachable!("attention node carries its weights"),
        };
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let need_q = self.nodes[q.0].needs;
        let need_k = self.nodes[k.0].needs;
        let need_v = self.nodes[v.0].needs;
        for id in [q, k, v] {
            if self.nodes[id.0].needs && grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
            }
        }
        let mut da = vec![0.0f32; t * s];
        for bi in 0..b {
            let a = &weights[bi * t * s..(bi + 1) * t * s];
            let go = &g[bi * t * d..(bi + 1) * t * d];
            if need_v {
                let dv = grads[v.0].as_mut().expect("allocated");
                mm_tn_acc(a, go, &mut dv[bi * s * d..(bi + 1) * s * d], s, t, d);
            }
            if need_q || need_k {
                // dS = A ⊙ (dA − rowsum(dA ⊙ A)), then rescale by 1/√D.
                da.fill(0.0);
                mm_nt_acc(go, &vd[bi * s * d..(bi + 1) * s * d], &mut da, t, d, s);
                for r in 0..t {
                    let ar = &a[r * s..(r + 1) * s];
                    let dr = &mut da[r * s..(r + 1) * s];
                    let dot: f32 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..s {
                        dr[j] = ar[j] * (dr[j] - dot) * scale;
                    }
                }
                if need_q {
                    let dq = grads[q.0].as_mut().expect("allocated");
                    mm_nn_acc(&da, &kd[bi * s * d..(bi + 1) * s * d], &mut dq[bi * t * d..(bi + 1) * t * d], t, s, d);
                }
                if need_k {
                    let dk = grads[k.0].as_mut().expect("allocated");
                    mm_tn_acc(&da, &qd[bi * t * d..(bi + 1) * t * d], &mut dk[bi * s * d..(bi + 1) * s * d], s, t, d);
                }
            }
        }
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

/// Copies `src` (laid out as `in_shape`) into `dst` with axes reordered so
/// that output axis `i` is input axis `axes[i]`.
fn permute_copy(src: &[f32], dst: &mut [f32], in_shape: &[usize], axes: &[usize]) {
    let rank = in_shape.len();
    if rank == 0 {
        dst.copy_from_slice(src);
        return;
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    // Odometer walk over the output index space, tracking the source offset
    // incrementally.
    let mut coords = vec![0usize; rank];
    let mut src_off = 0usize;
    for out_off in 0..dst.len() {
        dst[out_off] = src[src_off];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            src_off += strides_for_out[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            src_off -= strides_for_out[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
}
