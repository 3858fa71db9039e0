//! Gradient checks: every fused op's adjoint against central differences,
//! plus the tape's bookkeeping contracts.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{max_rel_err, numerical_grad, NdError, Tape, Tensor, TensorId};

const FD_EPS: f32 = 1e-3;
const FD_TOL: f32 = 1e-3;

/// Compares the tape gradient of `f` w.r.t. a single leaf against central
/// differences. `f` must be a pure function from the leaf to a scalar node.
fn fd_check(shape: &[usize], x0: &[f32], f: impl Fn(&mut Tape, TensorId) -> TensorId) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::from_vec(shape, x0.to_vec()).unwrap().with_grad());
    let loss = f(&mut tape, leaf);
    assert_eq!(tape.value(loss).numel(), 1, "fd_check needs a scalar loss");
    tape.backward(loss).unwrap();
    let analytic = tape.grad(leaf).unwrap().to_vec();
    let numeric = numerical_grad(
        |x| {
            let mut t = Tape::new();
            let id = t.leaf(Tensor::from_vec(shape, x.to_vec()).unwrap());
            let l = f(&mut t, id);
            t.value(l).data()[0]
        },
        x0,
        FD_EPS,
    );
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < FD_TOL, "gradient mismatch: max rel err {err:.2e}");
}

fn randn(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut t = Tensor::randn(shape, &mut rng);
    for v in t.data_mut() {
        *v *= scale;
    }
    t
}

#[test]
fn matmul_identity_returns_input() {
    let mut tape = Tape::new();
    let a = tape.leaf(randn(&[3, 3], 1, 1.0));
    let eye = tape.leaf(Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let out = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(a).data());
}

#[test]
fn matmul_matches_hand_result() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_rejects_inner_dim_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(NdError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b0 = randn(&[4, 5], 7, 0.5);
    fd_check(&[3, 4], randn(&[3, 4], 2, 0.5).data(), |t, x| {
        let b = t.leaf(b0.clone());
        let y = t.matmul(x, b).unwrap();
        t.sum_all(y).unwrap()
    });
    let a0 = randn(&[3, 4], 3, 0.5);
    fd_check(&[4, 5], randn(&[4, 5], 8, 0.5).data(), |t, x| {
        let a = t.leaf(a0.clone());
        let y = t.matmul(a, x).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    });
}

#[test]
fn conv2d_with_identity_kernel_is_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2, 1, 4, 4], 4, 1.0));
    let w = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv2d_ones_kernel_counts_neighbors() {
    // All-ones 3×3 kernel over an all-ones image sums the patch coverage:
    // 9 in the interior, 4 at corners.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 5, 5], 1.0));
    let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[0], 4.0);
    assert_eq!(d[2 * 5 + 2], 9.0);
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let w0 = randn(&[3, 2, 3, 3], 11, 0.3);
    let b0 = randn(&[3], 12, 0.3);
    // w.r.t. input, stride 1 with padding
    fd_check(&[2, 2, 5, 5], randn(&[2, 2, 5, 5], 10, 0.5).data(), |t, x| {
        let w = t.leaf(w0.clone());
        let b = t.leaf(b0.clone());
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.mean_all(sq).unwrap()
    });
    // w.r.t. weights, stride 2
    let x0 = randn(&[1, 2, 6, 6], 13, 0.5);
    fd_check(&[4, 2, 3, 3], randn(&[4, 2, 3, 3], 14, 0.3).data(), |t, w| {
        let x = t.leaf(x0.clone());
        let b = t.leaf(Tensor::zeros(&[4]));
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.mean_all(sq).unwrap()
    });
    // w.r.t. bias
    let x1 = randn(&[1, 1, 4, 4], 15, 0.5);
    fd_check(&[2], vec![0.1, -0.2].as_slice(), |t, b| {
        let x = t.leaf(x1.clone());
        let w = t.leaf(randn(&[2, 1, 3, 3], 16, 0.3));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.mean_all(sq).unwrap()
    });
}

#[test]
fn attention_single_key_broadcasts_value() {
    // With one key/value pair the softmax weight is 1 regardless of scores,
    // so every query position returns that value row.
    let mut tape = Tape::new();
    let q = tape.leaf(randn(&[1, 3, 4], 20, 1.0));
    let k = tape.leaf(randn(&[1, 1, 4], 21, 1.0));
    let v = tape.leaf(Tensor::from_vec(&[1, 1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let out = tape.attention(q, k, v).unwrap();
    let d = tape.value(out).data();
    for row in d.chunks_exact(4) {
        assert_eq!(row, &[1.0, -2.0, 3.0, 0.5]);
    }
}

#[test]
fn attention_equal_scores_average_values() {
    // Identical key rows give uniform weights, so the output is the mean of
    // the value rows.
    let mut tape = Tape::new();
    let q = tape.leaf(randn(&[1, 2, 3], 22, 1.0));
    let k = tape.leaf(Tensor::from_vec(&[1, 2, 3], vec![0.3, -0.1, 0.4, 0.3, -0.1, 0.4]).unwrap());
    let v = tape.leaf(Tensor::from_vec(&[1, 2, 3], vec![1., 2., 3., 5., 6., 7.]).unwrap());
    let out = tape.attention(q, k, v).unwrap();
    for row in tape.value(out).data().chunks_exact(3) {
        assert!((row[0] - 3.0).abs() < 1e-6);
        assert!((row[1] - 4.0).abs() < 1e-6);
        assert!((row[2] - 5.0).abs() < 1e-6);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (b, t_, s, d) = (2, 3, 4, 4);
    let q0 = randn(&[b, t_, d], 30, 0.5);
    let k0 = randn(&[b, s, d], 31, 0.5);
    let v0 = randn(&[b, s, d], 32, 0.5);
    fd_check(&[b, t_, d], q0.data(), |t, q| {
        let k = t.leaf(k0.clone());
        let v = t.leaf(v0.clone());
        let o = t.attention(q, k, v).unwrap();
        let sq = t.mul(o, o).unwrap();
        t.sum_all(sq).unwrap()
    });
    fd_check(&[b, s, d], k0.data(), |t, k| {
        let q = t.leaf(q0.clone());
        let v = t.leaf(v0.clone());
        let o = t.attention(q, k, v).unwrap();
        let sq = t.mul(o, o).unwrap();
        t.sum_all(sq).unwrap()
    });
    fd_check(&[b, s, d], v0.data(), |t, v| {
        let q = t.leaf(q0.clone());
        let k = t.leaf(k0.clone());
        let o = t.attention(q, k, v).unwrap();
        let sq = t.mul(o, o).unwrap();
        t.sum_all(sq).unwrap()
    });
}

#[test]
fn group_norm_constant_input_returns_bias() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 4, 3, 3], 5.0));
    let gain = tape.leaf(Tensor::full(&[4], 2.0));
    let bias = tape.leaf(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = tape.group_norm(x, gain, bias, 2, 1e-5).unwrap();
    let d = tape.value(y).data();
    for n in 0..2 {
        for c in 0..4 {
            let want = [0.1, 0.2, 0.3, 0.4][c];
            for j in 0..9 {
                assert!((d[(n * 4 + c) * 9 + j] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let gain0 = randn(&[4], 41, 0.5);
    let bias0 = randn(&[4], 42, 0.5);
    fd_check(&[2, 4, 3, 3], randn(&[2, 4, 3, 3], 40, 1.0).data(), |t, x| {
        let g = t.leaf(gain0.clone());
        let b = t.leaf(bias0.clone());
        let y = t.group_norm(x, g, b, 2, 1e-5).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.mean_all(sq).unwrap()
    });
    let x0 = randn(&[2, 4, 3, 3], 43, 1.0);
    fd_check(&[4], gain0.data(), |t, g| {
        let x = t.leaf(x0.clone());
        let b = t.leaf(bias0.clone());
        let y = t.group_norm(x, g, b, 4, 1e-5).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.mean_all(sq).unwrap()
    });
}

#[test]
fn film_gradients_match_finite_differences() {
    let s0 = randn(&[2, 3], 51, 0.5);
    let h0 = randn(&[2, 3], 52, 0.5);
    fd_check(&[2, 3, 2, 2], randn(&[2, 3, 2, 2], 50, 0.8).data(), |t, x| {
        let s = t.leaf(s0.clone());
        let h = t.leaf(h0.clone());
        let y = t.film(x, s, h).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    });
    let x0 = randn(&[2, 3, 2, 2], 53, 0.8);
    fd_check(&[2, 3], s0.data(), |t, s| {
        let x = t.leaf(x0.clone());
        let h = t.leaf(h0.clone());
        let y = t.film(x, s, h).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    });
}

#[test]
fn silu_at_zero_is_zero_and_gradient_checks() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.silu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    fd_check(&[8], randn(&[8], 60, 1.5).data(), |t, x| {
        let y = t.silu(x).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq).unwrap()
    });
}

#[test]
fn softmax_rows_sum_to_one_and_gradient_checks() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[3, 5], 61, 2.0));
    let y = tape.softmax_last(x).unwrap();
    for row in tape.value(y).data().chunks_exact(5) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
    let w0 = randn(&[3, 5], 63, 0.5);
    fd_check(&[3, 5], randn(&[3, 5], 62, 1.0).data(), |t, x| {
        let y = t.softmax_last(x).unwrap();
        let w = t.leaf(w0.clone());
        let p = t.mul(y, w).unwrap();
        t.sum_all(p).unwrap()
    });
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(randn(&[4, 4], 70, 1.0));
    let b = tape.leaf(randn(&[4, 4], 70, 1.0));
    let l = tape.mse(a, b).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
}

#[test]
fn mse_gradients_match_finite_differences() {
    let t0 = randn(&[3, 4], 71, 1.0);
    fd_check(&[3, 4], randn(&[3, 4], 72, 1.0).data(), |t, x| {
        let tgt = t.leaf(t0.clone());
        t.mse(x, tgt).unwrap()
    });
}

#[test]
fn layout_ops_gradients_match_finite_differences() {
    // reshape → permute → concat with self → scale_rows → upsample → mean
    fd_check(&[2, 3, 2, 2], randn(&[2, 3, 2, 2], 80, 0.8).data(), |t, x| {
        let r = t.reshape(x, &[2, 3, 4]).unwrap();
        let p = t.permute(r, &[1, 0, 2]).unwrap(); // [3,2,4]
        let c = t.concat(p, p, 1).unwrap(); // [3,4,4]
        let s = t.scale_rows(c, &[0.5, -1.0, 2.0]).unwrap();
        let rr = t.reshape(s, &[3, 1, 4, 4]).unwrap();
        let u = t.upsample_nearest2(rr).unwrap();
        let sq = t.mul(u, u).unwrap();
        t.mean_all(sq).unwrap()
    });
    fd_check(&[2, 6], randn(&[2, 6], 81, 0.8).data(), |t, x| {
        let r = t.repeat_leading(x, 3).unwrap();
        let sq = t.mul(r, r).unwrap();
        t.sum_all(sq).unwrap()
    });
    let b0 = randn(&[6], 83, 0.5);
    fd_check(&[4, 6], randn(&[4, 6], 82, 0.8).data(), |t, x| {
        let b = t.leaf(b0.clone());
        let y = t.add_bias(x, b).unwrap();
        let s = t.silu(y).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq).unwrap()
    });
}

#[test]
fn composite_network_gradient_checks_across_seeds() {
    // A miniature of the real model: conv → group norm → silu → film →
    // attention over flattened tokens → mse. Checked for several seeds.
    for seed in 0..5 {
        let w0 = randn(&[4, 2, 3, 3], 900 + seed, 0.4);
        let g0 = randn(&[4], 910 + seed, 0.3);
        let b0 = randn(&[4], 920 + seed, 0.3);
        let s0 = randn(&[2, 4], 930 + seed, 0.4);
        let kv0 = randn(&[2, 3, 4], 940 + seed, 0.6);
        let tgt0 = randn(&[2, 16, 4], 950 + seed, 0.6);
        fd_check(&[2, 2, 4, 4], randn(&[2, 2, 4, 4], seed, 0.7).data(), |t, x| {
            let w = t.leaf(w0.clone());
            let cb = t.leaf(Tensor::zeros(&[4]));
            let h = t.conv2d(x, w, cb, 1, 1).unwrap();
            let g = t.leaf(g0.clone());
            let b = t.leaf(b0.clone());
            let h = t.group_norm(h, g, b, 2, 1e-5).unwrap();
            let h = t.silu(h).unwrap();
            let s = t.leaf(s0.clone());
            let sh = t.leaf(s0.clone());
            let h = t.film(h, s, sh).unwrap();
            let tok = t.reshape(h, &[2, 4, 16]).unwrap();
            let tok = t.permute(tok, &[0, 2, 1]).unwrap(); // [2,16,4]
            let kv = t.leaf(kv0.clone());
            let o = t.attention(tok, kv, kv).unwrap();
            let tgt = t.leaf(tgt0.clone());
            t.mse(o, tgt).unwrap()
        });
    }
}

#[test]
fn unused_parameter_gets_zero_gradient_without_error() {
    let mut tape = Tape::new();
    let used = tape.leaf(randn(&[3], 100, 1.0).with_grad());
    let unused = tape.leaf(randn(&[7], 101, 1.0).with_grad());
    let loss = tape.sum_all(used).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(used).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(tape.grad(unused).unwrap(), &[0.0; 7]);
}

#[test]
fn backward_twice_without_reset_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2], 102, 1.0).with_grad());
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(NdError::Tape(_))));
    tape.reset();
    let x = tape.leaf(randn(&[2], 102, 1.0).with_grad());
    let loss = tape.sum_all(x).unwrap();
    assert!(tape.backward(loss).is_ok());
}

#[test]
fn backward_on_non_scalar_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2, 2], 103, 1.0).with_grad());
    assert!(matches!(tape.backward(x), Err(NdError::ShapeMismatch { .. })));
}

#[test]
fn values_computed_with_grad_disabled_are_detached() {
    let mut tape = Tape::new();
    let p = tape.leaf(randn(&[4], 104, 1.0).with_grad());
    tape.set_grad_enabled(false);
    let frozen = tape.scale(p, 2.0).unwrap(); // value computed, graph cut
    tape.set_grad_enabled(true);
    let diff = tape.sub(p, frozen).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    tape.backward(loss).unwrap();
    // d/dp Σ(p − 2p_frozen)² treats the frozen copy as constant: 2(p−2p).
    let pd = tape.value(p).data().to_vec();
    let g = tape.grad(p).unwrap();
    for (gv, pv) in g.iter().zip(&pd) {
        assert!((gv - 2.0 * (pv - 2.0 * pv)).abs() < 1e-5);
    }
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut tape = Tape::new();
    let p = tape.leaf(randn(&[4], 105, 1.0).with_grad());
    let d = tape.detach(p);
    let prod = tape.mul(p, d).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    // Gradient is the detached value itself, not 2p.
    let g = tape.grad(p).unwrap().to_vec();
    let pd = tape.value(p).data();
    for (gv, pv) in g.iter().zip(pd) {
        assert!((gv - pv).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[2, 3, 4, 4], 200, 1.0).with_grad());
        let w = tape.leaf(randn(&[3, 3, 3, 3], 201, 0.4).with_grad());
        let b = tape.leaf(Tensor::zeros(&[3]).with_grad());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let s = tape.silu(y).unwrap();
        let sq = tape.mul(s, s).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        tape.backward(loss).unwrap();
        (
            tape.value(loss).data()[0].to_bits(),
            tape.grad(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn permute_roundtrip_restores_layout() {
    let x0 = randn(&[2, 3, 4], 300, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let p = tape.permute(x, &[2, 0, 1]).unwrap();
    let back = tape.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(tape.value(back).shape(), x0.shape());
    assert_eq!(tape.value(back).data(), x0.data());
}
