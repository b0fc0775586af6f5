//! Low-quality clip synthesis: blur, down/up-sampling, additive Gaussian
//! noise and a block-DCT compression proxy, applied with one parameter set per
//! clip.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{Video, CHANNELS};
use crate::par;

pub const SIGMA_RANGE: (f64, f64) = (0.1, 10.0);
pub const SCALE_RANGE: (f64, f64) = (1.0, 4.0);
pub const NOISE_RANGE: (f64, f64) = (0.0, 10.0);
pub const CRF_RANGE: (f64, f64) = (18.0, 25.0);

/// Quantizer step per unit of crf.
pub const CRF_STEP: f64 = 0.0015;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Gaussian blur std in pixels.
    pub sigma: f64,
    /// Downsampling factor.
    pub scale: f64,
    /// Noise std on the 0–255 scale.
    pub noise: f64,
    /// Compression strength.
    pub crf: f64,
    /// Seed of the noise stream.
    pub seed: u64,
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name}={v} outside [{lo}, {hi}]")))
            }
        };
        check("sigma", self.sigma, SIGMA_RANGE)?;
        check("scale", self.scale, SCALE_RANGE)?;
        check("noise", self.noise, NOISE_RANGE)?;
        check("crf", self.crf, CRF_RANGE)
    }
}

/// Draws each parameter uniformly over its range.
pub fn sample_params(seed: u64) -> DegradeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    DegradeParams {
        sigma: draw(SIGMA_RANGE),
        scale: draw(SCALE_RANGE),
        noise: draw(NOISE_RANGE),
        crf: draw(CRF_RANGE),
        seed,
    }
}

/// Normalized 1-D Gaussian of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Validation(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    Ok(k)
}

/// One interleaved RGB frame, `(y, x, c)`.
struct Plane<'a> {
    data: &'a [f64],
    height: usize,
    width: usize,
}

fn blur_frame(frame: &Plane, kernel: &[f64]) -> Vec<f64> {
    let (h, w) = (frame.height, frame.width);
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; frame.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + k as isize - r, w);
                    acc += wt * frame.data[(y * w + sx) * CHANNELS + c];
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; frame.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (k, wt) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + k as isize - r, h);
                    acc += wt * tmp[(sy * w + x) * CHANNELS + c];
                }
                out[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    out
}

/// Source sample positions and weights for one axis of a bilinear resize
/// with the half-pixel (align-corners-false) convention.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn resize_bilinear(data: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let ys = resize_taps(h, nh);
    let xs = resize_taps(w, nw);
    let mut out = vec![0.0; nh * nw * CHANNELS];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..CHANNELS {
                let at = |y: usize, x: usize| data[(y * w + x) * CHANNELS + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * nw + ox) * CHANNELS + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn dct8() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        m
    })
}

/// Block-DCT quantization stand-in for codec compression. Each 8×8 block of
/// each channel goes through an orthonormal DCT-II, AC coefficients are
/// rounded to multiples of `q = 0.0015·crf`, and the block is inverted. The DC
/// coefficient is kept exact so flat regions pass through unchanged.
#[allow(clippy::needless_range_loop)]
pub fn compress_proxy(frame: &[f64], height: usize, width: usize, crf: f64) -> Vec<f64> {
    let q = CRF_STEP * crf;
    let m = dct8();
    let (bh, bw) = (height.div_ceil(8), width.div_ceil(8));
    let mut out = vec![0.0; frame.len()];
    for c in 0..CHANNELS {
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = (by * 8 + i).min(height - 1);
                        let x = (bx * 8 + j).min(width - 1);
                        *v = frame[(y * width + x) * CHANNELS + c];
                    }
                }
                // coef = M · block · Mᵀ
                let mut tmp = [[0.0; 8]; 8];
                for k in 0..8 {
                    for j in 0..8 {
                        tmp[k][j] = (0..8).map(|n| m[k][n] * block[n][j]).sum();
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for k in 0..8 {
                    for l in 0..8 {
                        let v: f64 = (0..8).map(|j| tmp[k][j] * m[l][j]).sum();
                        coef[k][l] = if k == 0 && l == 0 { v } else { q * (v / q).round() };
                    }
                }
                // block = Mᵀ · coef · M
                for n in 0..8 {
                    for l in 0..8 {
                        tmp[n][l] = (0..8).map(|k| m[k][n] * coef[k][l]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by * 8 + i, bx * 8 + j);
                        if y < height && x < width {
                            out[(y * width + x) * CHANNELS + c] =
                                (0..8).map(|l| tmp[i][l] * m[l][j]).sum();
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies the full degradation pipeline with the same parameters to every
/// frame.
pub fn degrade_clip(video: &Video, params: &DegradeParams) -> Result<Video> {
    degrade_impl(video, params, true)
}

/// [`degrade_clip`] with the compression stage bypassed.
pub fn degrade_clip_uncompressed(video: &Video, params: &DegradeParams) -> Result<Video> {
    degrade_impl(video, params, false)
}

fn degrade_impl(video: &Video, params: &DegradeParams, compress: bool) -> Result<Video> {
    params.validate()?;
    let kernel = gaussian_kernel(params.sigma)?;
    let (frames, h, w) = video.dims();
    let nh = ((h as f64 / params.scale).round() as usize).max(1);
    let nw = ((w as f64 / params.scale).round() as usize).max(1);
    let noise = (params.noise > 0.0)
        .then(|| Normal::new(0.0, params.noise / 255.0).expect("finite noise std"));

    let out_frames = par::map_indexed(frames, |f| {
        let plane = Plane {
            data: video.frame(f),
            height: h,
            width: w,
        };
        let blurred = blur_frame(&plane, &kernel);
        let small = resize_bilinear(&blurred, h, w, nh, nw);
        let mut frame = resize_bilinear(&small, nh, nw, h, w);
        if let Some(dist) = &noise {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(1 + f as u64);
            frame.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
        }
        if compress {
            frame = compress_proxy(&frame, h, w, params.crf);
        }
        frame.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        frame
    });
    Ok(Video::from_parts_unchecked(frames, h, w, out_frames.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::synth_clip;

    fn identity_params() -> DegradeParams {
        DegradeParams {
            sigma: 0.1,
            scale: 1.0,
            noise: 0.0,
            crf: 18.0,
            seed: 3,
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        assert_eq!(sample_params(9), sample_params(9));
        let n = 10_000;
        let samples: Vec<_> = (0..n).map(sample_params).collect();
        for p in &samples {
            p.validate().unwrap();
        }
        let mean_scale = samples.iter().map(|p| p.scale).sum::<f64>() / n as f64;
        assert!((mean_scale - 2.5).abs() < 0.05, "mean scale {mean_scale}");
        let (lo, hi) = samples
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.sigma), hi.max(p.sigma)));
        assert!(lo >= 0.1 && hi <= 10.0);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for sigma in [0.1, 0.7, 1.0, 2.5, 10.0] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() / 2 {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
        let k = gaussian_kernel(0.1).unwrap();
        assert_eq!(k.len(), 3);
        assert!(k[1] > 0.99);
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        assert!(matches!(gaussian_kernel(0.0), Err(Error::Validation(_))));
        assert!(matches!(gaussian_kernel(-1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn quantizer_step_at_crf_18() {
        assert!((CRF_STEP * 18.0 - 0.027).abs() < 1e-15);
    }

    #[test]
    fn constant_frame_survives_compression() {
        let frame = vec![0.5; 16 * 24 * 3];
        let out = compress_proxy(&frame, 16, 24, 25.0);
        for v in out {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn compression_error_grows_with_crf() {
        for seed in 0..5 {
            let (v, _) = synth_clip(seed, 1, 64).unwrap();
            let mse = |crf| {
                let out = compress_proxy(v.frame(0), 64, 64, crf);
                out.iter().zip(v.frame(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            };
            assert!(mse(25.0) >= mse(18.0));
        }
    }

    #[test]
    fn resize_at_unit_scale_is_identity() {
        let (v, _) = synth_clip(4, 1, 16).unwrap();
        let out = resize_bilinear(v.frame(0), 16, 16, 16, 16);
        assert_eq!(out, v.frame(0));
    }

    #[test]
    fn identity_parameters_leave_clip_unchanged() {
        let (v, _) = synth_clip(5, 5, 32).unwrap();
        let out = degrade_clip_uncompressed(&v, &identity_params()).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(v.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 2e-3);
    }

    #[test]
    fn degradation_is_deterministic_and_shape_preserving() {
        let (v, _) = synth_clip(6, 5, 32).unwrap();
        let p = sample_params(77);
        let a = degrade_clip(&v, &p).unwrap();
        let b = degrade_clip(&v, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), v.dims());
        assert!(a.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let (v, _) = synth_clip(6, 1, 16).unwrap();
        let p = DegradeParams {
            crf: 40.0,
            ..identity_params()
        };
        assert!(matches!(degrade_clip(&v, &p), Err(Error::Validation(_))));
    }
}
