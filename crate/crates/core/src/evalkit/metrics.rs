//! Image-quality and navigation metrics.

use crate::navsim::Observation;
use crate::ndgrad::Tensor;

use super::{EpisodeResult, EvalError};

/// Reported for identical images in place of +∞.
pub const PSNR_CAP_DB: f32 = 100.0;

/// Peak signal-to-noise ratio in dB between same-shaped tensors with
/// dynamic range 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr_tensors(a: &Tensor, b: &Tensor) -> Result<f32, EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("psnr over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += ((x - y) as f64).powi(2);
    }
    let mse = acc / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB as f64) as f32)
}

/// PSNR over full observations (all channels); infallible because
/// observations share one shape.
pub fn psnr(a: &Observation, b: &Observation) -> f32 {
    psnr_tensors(&a.data, &b.data).expect("observations share a shape")
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let (y, x) = ((i / SSIM_WINDOW) as f64, (i % SSIM_WINDOW) as f64);
        *v = (-((x - c).powi(2) + (y - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity between `[C, H, W]` tensors: Gaussian 11×11
/// window, σ = 1.5, stability constants (0.01)² and (0.03)², averaged over
/// valid window positions and channels.
pub fn ssim_tensors(a: &Tensor, b: &Tensor) -> Result<f32, EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("ssim over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let [c, h, w]: [usize; 3] = a
        .shape()
        .try_into()
        .map_err(|_| EvalError::Shape(format!("ssim expects [C, H, W], got {:?}", a.shape())))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Contract(format!(
            "{h}×{w} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} ssim window"
        )));
    }
    let win = gaussian_window();
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0f64;
    for ch in 0..c {
        let plane = ch * h * w;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[wy * SSIM_WINDOW + wx];
                        let x = da[plane + (oy + wy) * w + ox + wx] as f64;
                        let y = db[plane + (oy + wy) * w + ox + wx] as f64;
                        mx += g * x;
                        my += g * y;
                        mxx += g * x * x;
                        myy += g * y * y;
                        mxy += g * x * y;
                    }
                }
                let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok((total / c as f64) as f32)
}

/// SSIM over full observations (all channels).
pub fn ssim(a: &Observation, b: &Observation) -> f32 {
    ssim_tensors(&a.data, &b.data).expect("observations share a shape larger than the window")
}

/// Fraction of successful episodes.
pub fn success_rate(results: &[EpisodeResult]) -> Result<f32, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("success rate of an empty result set".into()));
    }
    Ok(results.iter().filter(|r| r.success).count() as f32 / results.len() as f32)
}

/// Success-weighted path length: mean of `Sᵢ·lᵢ / max(pᵢ, lᵢ)` with `l` the
/// shortest path and `p` the executed path. An episode that starts at its
/// goal (`p = l = 0`) contributes its success indicator.
pub fn spl(results: &[EpisodeResult]) -> Result<f32, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Contract("spl of an empty result set".into()));
    }
    if let Some(bad) = results.iter().find(|r| r.shortest_len < 0.0 || r.path_len < 0.0) {
        return Err(EvalError::Contract(format!(
            "negative path length in result for seed {}",
            bad.seed
        )));
    }
    let mut acc = 0.0f64;
    for r in results {
        let s = if r.success { 1.0f64 } else { 0.0 };
        let denom = r.path_len.max(r.shortest_len) as f64;
        acc += if denom == 0.0 { s } else { s * r.shortest_len as f64 / denom };
    }
    Ok((acc / results.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_world, render, Family, Pose, IMG, OBS_CHANNELS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn result(success: bool, path: f32, shortest: f32) -> EpisodeResult {
        EpisodeResult {
            success,
            path_len: path,
            shortest_len: shortest,
            steps: 10,
            final_dist: 0.1,
            goal_tag: "point".into(),
            seed: 0,
        }
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_of_uniform_difference_is_exact() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::from_vec(&[1, 16, 16], vec![0.1; 256]).unwrap();
        assert!((psnr_tensors(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr_tensors(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pairs() {
        for seed in 0..5 {
            let a = random_tensor(&[3, 20, 20], seed);
            let b = random_tensor(&[3, 20, 20], seed + 100);
            // Definition computed from scratch: mean squared error over all
            // entries, then 10·log10(1/mse).
            let mut mse = 0.0f64;
            for i in 0..a.numel() {
                mse += ((a.data()[i] - b.data()[i]) as f64).powi(2);
            }
            mse /= a.numel() as f64;
            let want = 10.0 * (1.0 / mse).log10();
            assert!((psnr_tensors(&a, &b).unwrap() as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let world = generate_world(Family::Sparse, 2).unwrap();
        let clean = render(&world, &Pose::new(3.0, 3.0, 1.0)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let noisy = |amp: f32, rng: &mut ChaCha12Rng| {
            let data = clean
                .data
                .data()
                .iter()
                .map(|&v| (v + amp * (rng.random::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0))
                .collect();
            Tensor::from_vec(&[OBS_CHANNELS, IMG, IMG], data).unwrap()
        };
        let p05 = psnr_tensors(&clean.data, &noisy(0.05, &mut rng)).unwrap();
        let p10 = psnr_tensors(&clean.data, &noisy(0.10, &mut rng)).unwrap();
        let p20 = psnr_tensors(&clean.data, &noisy(0.20, &mut rng)).unwrap();
        assert!(p05 > p10 && p10 > p20, "{p05} > {p10} > {p20} expected");
    }

    #[test]
    fn ssim_is_one_exactly_for_identical_inputs_only() {
        let a = random_tensor(&[2, 16, 16], 3);
        assert!((ssim_tensors(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let mut perturbed = a.data().to_vec();
        perturbed[40] = (perturbed[40] + 0.5).min(1.0);
        let b = Tensor::from_vec(&[2, 16, 16], perturbed).unwrap();
        assert!(ssim_tensors(&a, &b).unwrap() < 1.0 - 1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_tensor(&[1, 16, 16], 5);
        let b = random_tensor(&[1, 16, 16], 6);
        let ab = ssim_tensors(&a, &b).unwrap();
        let ba = ssim_tensors(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn inverted_checkerboard_scores_negative() {
        let mut x = vec![0.0f32; 16 * 16];
        for y in 0..16 {
            for xx in 0..16 {
                x[y * 16 + xx] = ((y + xx) % 2) as f32;
            }
        }
        let a = Tensor::from_vec(&[1, 16, 16], x.clone()).unwrap();
        let inv = Tensor::from_vec(&[1, 16, 16], x.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim_tensors(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_independent_reimplementation() {
        // Oracle: the same definition written as isolated scalar loops with
        // its own window construction.
        let a = random_tensor(&[1, 16, 16], 11);
        let b = random_tensor(&[1, 16, 16], 12);
        let (da, db) = (a.data(), b.data());
        let mut win = vec![0.0f64; 121];
        let mut norm = 0.0;
        for y in 0..11i64 {
            for x in 0..11i64 {
                let g = (-(((x - 5).pow(2) + (y - 5).pow(2)) as f64) / 4.5).exp();
                win[(y * 11 + x) as usize] = g;
                norm += g;
            }
        }
        let mut acc = 0.0f64;
        let mut cnt = 0;
        for oy in 0..6 {
            for ox in 0..6 {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                for wy in 0..11 {
                    for wx in 0..11 {
                        let g = win[wy * 11 + wx] / norm;
                        mx += g * da[(oy + wy) * 16 + ox + wx] as f64;
                        my += g * db[(oy + wy) * 16 + ox + wx] as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0f64, 0.0, 0.0);
                for wy in 0..11 {
                    for wx in 0..11 {
                        let g = win[wy * 11 + wx] / norm;
                        let x = da[(oy + wy) * 16 + ox + wx] as f64;
                        let y = db[(oy + wy) * 16 + ox + wx] as f64;
                        vx += g * x * x;
                        vy += g * y * y;
                        cov += g * x * y;
                    }
                }
                vx -= mx * mx;
                vy -= my * my;
                cov -= mx * my;
                acc += ((2.0 * mx * my + 1e-4) * (2.0 * cov + 9e-4))
                    / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                cnt += 1;
            }
        }
        let want = acc / cnt as f64;
        assert!((ssim_tensors(&a, &b).unwrap() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn small_images_are_rejected() {
        let a = random_tensor(&[1, 8, 8], 1);
        assert!(matches!(ssim_tensors(&a, &a), Err(EvalError::Contract(_))));
        let b = random_tensor(&[1, 16, 16], 1);
        assert!(matches!(ssim_tensors(&a, &b), Err(EvalError::Shape(_))));
    }

    #[test]
    fn spl_and_sr_match_worked_examples() {
        let set = [result(true, 10.0, 5.0), result(false, 3.0, 4.0)];
        assert!((spl(&set).unwrap() - 0.25).abs() < 1e-7);
        assert!((success_rate(&set).unwrap() - 0.5).abs() < 1e-7);
        let perfect = [result(true, 2.0, 2.0), result(true, 7.5, 7.5)];
        assert!((spl(&perfect).unwrap() - 1.0).abs() < 1e-7);
        assert!(spl(&[]).is_err());
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn spl_matches_brute_force_and_never_exceeds_sr() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let set: Vec<EpisodeResult> = (0..12)
                .map(|_| {
                    result(
                        rng.random::<f32>() < 0.6,
                        rng.random::<f32>() * 20.0,
                        0.1 + rng.random::<f32>() * 10.0,
                    )
                })
                .collect();
            let mut want = 0.0f64;
            for r in &set {
                if r.success {
                    want += (r.shortest_len / r.path_len.max(r.shortest_len)) as f64;
                }
            }
            want /= set.len() as f64;
            let got = spl(&set).unwrap();
            assert!((got as f64 - want).abs() < 1e-6);
            assert!(got <= success_rate(&set).unwrap() + 1e-7);
        }
    }

    #[test]
    fn immediate_success_counts_fully_toward_spl() {
        let set = [result(true, 0.0, 0.0)];
        assert_eq!(spl(&set).unwrap(), 1.0);
    }
}
