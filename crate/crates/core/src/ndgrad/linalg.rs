//! Matrix kernels behind the tensor ops.
//!
//! All matrices are row-major `f32` slices. The kernels process four output
//! rows per pass so the inner loops vectorize well on a single core; shapes
//! here are small enough that this simple blocking is within a modest factor
//! of peak and keeps the code auditable.

/// `out = a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
pub fn mm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    mm_nn_acc(a, b, out, m, k, n);
}

/// `out += a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
pub fn mm_nn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (r01, r23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (r0, r1) = r01.split_at_mut(n);
        let (r2, r3) = r23.split_at_mut(n);
        for l in 0..k {
            let a0 = a[i * k + l];
            let a1 = a[(i + 1) * k + l];
            let a2 = a[(i + 2) * k + l];
            let a3 = a[(i + 3) * k + l];
            let br = &b[l * n..l * n + n];
            for j in 0..n {
                let bv = br[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let br = &b[l * n..l * n + n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
        i += 1;
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`, `out: m×n`.
pub fn mm_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += ar[l] * br[l];
            }
            or[j] += acc;
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`, `out: m×n`.
pub fn mm_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let br = &b[l * n..l * n + n];
        let mut i = 0;
        while i + 4 <= m {
            let a0 = a[l * m + i];
            let a1 = a[l * m + i + 1];
            let a2 = a[l * m + i + 2];
            let a3 = a[l * m + i + 3];
            let (r01, r23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
            let (r0, r1) = r01.split_at_mut(n);
            let (r2, r3) = r23.split_at_mut(n);
            for j in 0..n {
                let bv = br[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
            i += 4;
        }
        while i < m {
            let av = a[l * m + i];
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
            i += 1;
        }
    }
}

/// Expands one `[c, h, w]` image into `[c·kh·kw, oh·ow]` patch columns.
///
/// Out-of-bounds taps (from zero padding) contribute zeros. The column
/// buffer is overwritten in full.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    col: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad);
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatters patch-column gradients back onto the `[c, h, w]` image,
/// accumulating where patches overlap. Inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[f32],
    dx: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad);
    debug_assert_eq!(dx.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output spatial size of a convolution over an `h×w` input.
pub fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.37 + 0.1).sin() * scale).collect()
    }

    #[test]
    fn nn_matches_naive_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 4, 4), (7, 9, 11), (13, 6, 17)] {
            let a = ramp(m * k, 1.0);
            let b = ramp(k * n, 0.7);
            let mut out = vec![0.0; m * n];
            mm_nn(&a, &b, &mut out, m, k, n);
            let want = naive_mm(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nt_and_tn_match_explicit_transposes() {
        let (m, k, n) = (6, 7, 5);
        let a = ramp(m * k, 1.0);
        let b = ramp(n * k, 0.9); // n×k, used as bᵀ
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for l in 0..k {
                bt[l * n + j] = b[j * k + l];
            }
        }
        let want = naive_mm(&a, &bt, m, k, n);
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }

        let at = {
            // k×m layout holding aᵀ
            let mut t = vec![0.0; k * m];
            for i in 0..m {
                for l in 0..k {
                    t[l * m + i] = a[i * k + l];
                }
            }
            t
        };
        let mut out2 = vec![0.0; m * n];
        mm_tn_acc(&at, &bt, &mut out2, m, k, n);
        for (x, y) in out2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn im2col_identity_kernel_copies_input() {
        // 1×1 kernel, stride 1, no padding: columns are exactly the pixels.
        let (c, h, w) = (3, 4, 5);
        let x = ramp(c * h * w, 1.0);
        let mut col = vec![0.0; c * h * w];
        im2col(&x, &mut col, c, h, w, 1, 1, 1, 0);
        assert_eq!(col, x);
    }

    #[test]
    fn col2im_roundtrip_counts_patch_coverage() {
        // With a 3×3 kernel and all-ones columns, col2im counts how many
        // patches cover each pixel; interior pixels of a large image are
        // covered 9 times.
        let (c, h, w) = (1, 6, 6);
        let (oh, ow) = conv_out_hw(h, w, 3, 3, 1, 1);
        let col = vec![1.0; 9 * oh * ow];
        let mut dx = vec![0.0; c * h * w];
        col2im_acc(&col, &mut dx, c, h, w, 3, 3, 1, 1);
        assert_eq!(dx[(2 * w) + 2], 9.0);
        assert_eq!(dx[0], 4.0); // corner
    }
}
