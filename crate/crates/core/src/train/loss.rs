//! Stochastic face-focused reconstruction loss and the gradient-structure
//! perceptual proxy.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::media_io::{Video, CHANNELS};

/// Bernoulli switch between the face-masked and global objectives.
pub fn sample_b<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Reconstruction loss and its gradient with respect to `pred`.
///
/// Global branch (`face = false`): mean of `(pred − target)²`.
/// Face branch: `Σ (M ⊙ (pred − target))² / max(ΣM, 1)`.
pub fn masked_loss(target: &[f64], pred: &[f64], mask: &[f64], face: bool) -> Result<(f64, Vec<f64>)> {
    if target.len() != pred.len() || mask.len() != pred.len() {
        return Err(shape_err!(
            "loss operands differ in length: target {}, pred {}, mask {}",
            target.len(),
            pred.len(),
            mask.len()
        ));
    }
    if face {
        let area = mask.iter().sum::<f64>().max(1.0);
        let mut loss = 0.0;
        let grad = pred
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((&p, &t), &m)| {
                let d = m * (p - t);
                loss += d * d;
                2.0 * m * d / area
            })
            .collect();
        Ok((loss / area, grad))
    } else {
        let n = pred.len().max(1) as f64;
        let mut loss = 0.0;
        let grad = pred
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = p - t;
                loss += d * d;
                2.0 * d / n
            })
            .collect();
        Ok((loss / n, grad))
    }
}

/// `p·L_face + (1 − p)·L_global`, the expectation of [`masked_loss`] over the
/// Bernoulli switch.
pub fn expected_masked_loss(target: &[f64], pred: &[f64], mask: &[f64], p: f64) -> Result<f64> {
    let (face, _) = masked_loss(target, pred, mask, true)?;
    let (global, _) = masked_loss(target, pred, mask, false)?;
    Ok(p * face + (1.0 - p) * global)
}

/// Squared first differences of `d` along x and y, summed, plus gradient
/// contributions scaled by `weight`. Returns the sum and the pair count.
fn diff_energy(d: &[f64], frames: usize, h: usize, w: usize, grad: Option<(&mut [f64], f64)>) -> (f64, usize) {
    let idx = |f: usize, y: usize, x: usize, c: usize| ((f * h + y) * w + x) * CHANNELS + c;
    let mut sum = 0.0;
    let mut grad = grad;
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let here = idx(f, y, x, c);
                    if x + 1 < w {
                        let there = idx(f, y, x + 1, c);
                        let g = d[there] - d[here];
                        sum += g * g;
                        if let Some((buf, k)) = grad.as_mut() {
                            buf[there] += 2.0 * *k * g;
                            buf[here] -= 2.0 * *k * g;
                        }
                    }
                    if y + 1 < h {
                        let there = idx(f, y + 1, x, c);
                        let g = d[there] - d[here];
                        sum += g * g;
                        if let Some((buf, k)) = grad.as_mut() {
                            buf[there] += 2.0 * *k * g;
                            buf[here] -= 2.0 * *k * g;
                        }
                    }
                }
            }
        }
    }
    let pairs = frames * CHANNELS * (h * (w - 1) + (h - 1) * w);
    (sum, pairs)
}

fn avg_pool2(d: &[f64], frames: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; frames * ph * pw * CHANNELS];
    for f in 0..frames {
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..CHANNELS {
                    let at = |yy: usize, xx: usize| d[((f * h + yy) * w + xx) * CHANNELS + c];
                    out[((f * ph + y) * pw + x) * CHANNELS + c] =
                        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
    }
    out
}

/// Gradient-structure perceptual proxy: mean squared difference of the
/// horizontal and vertical first-difference maps of `pred` and `target`, at
/// full resolution and after 2×2 average pooling, averaged over both scales.
/// Returns the loss and its gradient with respect to `pred` (video layout).
pub fn percep_proxy(pred: &Video, target: &Video) -> Result<(f64, Vec<f64>)> {
    pred.same_shape(target)?;
    percep_proxy_raw(pred.data(), target.data(), pred.dims())
}

/// [`percep_proxy`] on raw video-layout buffers.
pub fn percep_proxy_raw(pred: &[f64], target: &[f64], dims: (usize, usize, usize)) -> Result<(f64, Vec<f64>)> {
    let (frames, h, w) = dims;
    if pred.len() != target.len() || pred.len() != frames * h * w * CHANNELS {
        return Err(shape_err!("perceptual proxy operands do not match {frames}x{h}x{w}x3"));
    }
    if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Validation(format!("frames of {h}x{w} are too small for the two-scale proxy")));
    }
    let d: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a - b).collect();
    let mut grad = vec![0.0; d.len()];

    let (_, full_pairs) = diff_energy(&d, frames, h, w, None);
    let full_w = 0.5 / full_pairs as f64;
    let (full_sum, _) = diff_energy(&d, frames, h, w, Some((&mut grad, full_w)));

    let pooled = avg_pool2(&d, frames, h, w);
    let (ph, pw) = (h / 2, w / 2);
    let (_, half_pairs) = diff_energy(&pooled, frames, ph, pw, None);
    let half_w = 0.5 / half_pairs as f64;
    let mut pooled_grad = vec![0.0; pooled.len()];
    let (half_sum, _) = diff_energy(&pooled, frames, ph, pw, Some((&mut pooled_grad, half_w)));
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    grad[((f * h + y) * w + x) * CHANNELS + c] +=
                        0.25 * pooled_grad[((f * ph + y / 2) * pw + x / 2) * CHANNELS + c];
                }
            }
        }
    }
    let loss = full_w * full_sum + half_w * half_sum;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::synth_clip;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let y = random(64, 1);
        let m: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        for face in [false, true] {
            let (l, g) = masked_loss(&y, &y, &m, face).unwrap();
            assert_eq!(l, 0.0);
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_mask_matches_global_branch_exactly() {
        let y = random(96, 2);
        let p = random(96, 3);
        let ones = vec![1.0; 96];
        assert_eq!(masked_loss(&y, &p, &ones, true).unwrap(), masked_loss(&y, &p, &ones, false).unwrap());
    }

    #[test]
    fn empty_mask_gives_zero_face_loss() {
        let y = random(32, 4);
        let p = random(32, 5);
        let (l, g) = masked_loss(&y, &p, &[0.0; 32], true).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let y = random(40, 6);
        let p = random(40, 7);
        let m: Vec<f64> = random(40, 8).iter().map(|v| v.abs()).collect();
        for face in [false, true] {
            let (_, g) = masked_loss(&y, &p, &m, face).unwrap();
            for i in 0..40 {
                let eps = 1e-6;
                let mut a = p.clone();
                a[i] += eps;
                let mut b = p.clone();
                b[i] -= eps;
                let num = (masked_loss(&y, &a, &m, face).unwrap().0 - masked_loss(&y, &b, &m, face).unwrap().0) / (2.0 * eps);
                assert!((num - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(masked_loss(&[0.0; 3], &[0.0; 4], &[0.0; 4], false), Err(Error::Shape(_))));
    }

    #[test]
    fn bernoulli_extremes_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| !sample_b(&mut rng, 0.0)));
        assert!((0..1000).all(|_| sample_b(&mut rng, 1.0)));
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_b(&mut rng, 0.5)).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.015);
    }

    #[test]
    fn proxy_is_zero_for_identical_clips_and_offset_invariant() {
        let (v, _) = synth_clip(3, 5, 16).unwrap();
        assert_eq!(percep_proxy(&v, &v).unwrap().0, 0.0);
        let (w, _) = synth_clip(4, 5, 16).unwrap();
        let base = percep_proxy_raw(w.data(), v.data(), v.dims()).unwrap().0;
        let shifted: Vec<f64> = w.data().iter().map(|x| x + 0.25).collect();
        let moved = percep_proxy_raw(&shifted, v.data(), v.dims()).unwrap().0;
        assert!((base - moved).abs() < 1e-12);
        assert!(base > 0.0);
    }

    #[test]
    fn proxy_gradient_matches_finite_differences() {
        let dims = (5, 8, 8);
        let n = 5 * 8 * 8 * 3;
        let x = random(n, 9);
        let xh = random(n, 10);
        let (_, g) = percep_proxy_raw(&xh, &x, dims).unwrap();
        let eps = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let mut a = xh.clone();
            a[i] += eps;
            let mut b = xh.clone();
            b[i] -= eps;
            let num = (percep_proxy_raw(&a, &x, dims).unwrap().0 - percep_proxy_raw(&b, &x, dims).unwrap().0) / (2.0 * eps);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
