//! Fixed analytic latent codec. Frame 0 is projected patch-wise onto 16
//! low-frequency 3-D DCT vectors of an 8×8×3 patch; every following group of
//! four frames is projected onto 16 low-frequency 4-D DCT vectors of a
//! 4×8×8×3 tube. Decoding is the adjoint (transpose) map.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{shape_err, Result};
use crate::media_io::{check_clip_dims, Video, CHANNELS};
use crate::par;

/// Latent channel count.
pub const LATENT_CHANNELS: usize = 16;
/// Spatial compression factor.
pub const PATCH: usize = 8;
/// Temporal compression factor after the first frame.
pub const TUBE: usize = 4;

const FIRST_LEN: usize = PATCH * PATCH * CHANNELS;
const GROUP_LEN: usize = TUBE * FIRST_LEN;

static ENCODE_CALLS: AtomicUsize = AtomicUsize::new(0);
static DECODE_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of [`encode`] calls.
pub fn encode_calls() -> usize {
    ENCODE_CALLS.load(Ordering::Relaxed)
}

/// Process-wide count of decoder passes ([`decode`], [`decode_unclamped`]).
pub fn decode_calls() -> usize {
    DECODE_CALLS.load(Ordering::Relaxed)
}

/// Latent tensor laid out as `(c, t, h, w)` with `c = 16`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; LATENT_CHANNELS * frames * height * width],
        }
    }

    pub fn from_data(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != LATENT_CHANNELS * frames * height * width {
            return Err(shape_err!(
                "latent data length {} does not match 16x{frames}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Latent shape `(T', H', W')` for a clip of `(frames, height, width)`.
    pub fn dims_for_clip(frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        check_clip_dims(frames, height, width)?;
        Ok((1 + (frames - 1) / TUBE, height / PATCH, width / PATCH))
    }

    /// Pixel clip shape `(1+T, H, W)` this latent decodes to.
    pub fn clip_dims(&self) -> (usize, usize, usize) {
        (1 + TUBE * (self.frames - 1), self.height * PATCH, self.width * PATCH)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(T', H', W')`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    /// `[C, T', H', W']`.
    pub fn shape(&self) -> [usize; 4] {
        [LATENT_CHANNELS, self.frames, self.height, self.width]
    }

    /// Number of sites per channel.
    pub fn plane_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + t) * self.height + y) * self.width + x
    }

    pub fn same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "latent shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Mean squared difference against `other`.
    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        self.same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Orthonormal-row projection matrices for first-frame patches and 4-frame tubes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBasis {
    /// 16×192, row-major.
    pub first: Vec<f64>,
    /// 16×768, row-major.
    pub group: Vec<f64>,
}

fn dct_vec(len: usize, k: usize) -> Vec<f64> {
    let alpha = if k == 0 {
        (1.0 / len as f64).sqrt()
    } else {
        (2.0 / len as f64).sqrt()
    };
    (0..len)
        .map(|n| alpha * (PI * (2 * n + 1) as f64 * k as f64 / (2 * len) as f64).cos())
        .collect()
}

/// The `count` lowest-frequency separable DCT vectors over an axis-size list,
/// ordered by frequency-index sum then lexicographically.
fn low_frequency_rows(axes: &[usize], count: usize) -> Vec<f64> {
    let mut freqs: Vec<Vec<usize>> = vec![vec![]];
    for &n in axes {
        freqs = freqs
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |k| {
                    let mut f = prefix.clone();
                    f.push(k);
                    f
                })
            })
            .collect();
    }
    freqs.sort_by(|a, b| {
        let (sa, sb): (usize, usize) = (a.iter().sum(), b.iter().sum());
        sa.cmp(&sb).then_with(|| a.cmp(b))
    });
    let tables: Vec<Vec<Vec<f64>>> = axes
        .iter()
        .map(|&n| (0..n).map(|k| dct_vec(n, k)).collect())
        .collect();
    let len: usize = axes.iter().product();
    let mut rows = Vec::with_capacity(count * len);
    for f in freqs.iter().take(count) {
        for flat in 0..len {
            let mut rem = flat;
            let mut v = 1.0;
            for (axis, &n) in axes.iter().enumerate().rev() {
                v *= tables[axis][f[axis]][rem % n];
                rem /= n;
            }
            rows.push(v);
        }
    }
    rows
}

impl PatchBasis {
    pub fn new() -> Self {
        let basis = Self {
            first: low_frequency_rows(&[PATCH, PATCH, CHANNELS], LATENT_CHANNELS),
            group: low_frequency_rows(&[TUBE, PATCH, PATCH, CHANNELS], LATENT_CHANNELS),
        };
        debug_assert_eq!(basis.group.len(), LATENT_CHANNELS * GROUP_LEN);
        basis
    }
}

impl Default for PatchBasis {
    fn default() -> Self {
        Self::new()
    }
}

pub fn make_basis() -> PatchBasis {
    PatchBasis::new()
}

/// Pixel offsets (within a `(f, y, x, c)` buffer) of the patch or tube vector
/// feeding latent site `(t, py, px)`, in basis order `(t, h, w, c)`.
fn gather_offsets(t: usize, py: usize, px: usize, height: usize, width: usize) -> Vec<usize> {
    let (first_frame, span) = if t == 0 { (0, 1) } else { (1 + TUBE * (t - 1), TUBE) };
    let mut offs = Vec::with_capacity(span * FIRST_LEN);
    for dt in 0..span {
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                let base = (((first_frame + dt) * height + py * PATCH + dy) * width + px * PATCH + dx)
                    * CHANNELS;
                offs.extend(base..base + CHANNELS);
            }
        }
    }
    offs
}

/// Projects a raw pixel buffer in video layout to latent data.
pub(crate) fn project(pixels: &[f64], frames: usize, height: usize, width: usize, basis: &PatchBasis) -> LatentGrid {
    let (lt, lh, lw) = (1 + (frames - 1) / TUBE, height / PATCH, width / PATCH);
    let sites: Vec<[f64; LATENT_CHANNELS]> = par::map_indexed(lt * lh * lw, |s| {
        let (t, py, px) = (s / (lh * lw), (s / lw) % lh, s % lw);
        let offs = gather_offsets(t, py, px, height, width);
        let rows = if t == 0 { &basis.first } else { &basis.group };
        let n = offs.len();
        let mut z = [0.0; LATENT_CHANNELS];
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &rows[c * n..(c + 1) * n];
            *zc = row.iter().zip(&offs).map(|(b, &o)| b * pixels[o]).sum();
        }
        z
    });
    let mut out = LatentGrid::zeros(lt, lh, lw);
    let plane = out.plane_len();
    for (s, z) in sites.iter().enumerate() {
        for (c, &v) in z.iter().enumerate() {
            out.data[c * plane + s] = v;
        }
    }
    out
}

/// Encodes a clip into its `16×T'×H'×W'` latent.
pub fn encode(video: &Video, basis: &PatchBasis) -> Result<LatentGrid> {
    let (f, h, w) = video.dims();
    check_clip_dims(f, h, w)?;
    ENCODE_CALLS.fetch_add(1, Ordering::Relaxed);
    Ok(project(video.data(), f, h, w, basis))
}

/// Adjoint of [`encode`] without the output clamp, in video layout.
pub fn decode_unclamped(latent: &LatentGrid, basis: &PatchBasis) -> Vec<f64> {
    DECODE_CALLS.fetch_add(1, Ordering::Relaxed);
    reconstruct(latent, basis)
}

fn reconstruct(latent: &LatentGrid, basis: &PatchBasis) -> Vec<f64> {
    let (frames, height, width) = latent.clip_dims();
    let (lh, lw) = (latent.height, latent.width);
    let plane = latent.plane_len();
    let mut out = vec![0.0; frames * height * width * CHANNELS];
    // Latent frame t owns a disjoint, contiguous run of pixel frames.
    let frame_len = height * width * CHANNELS;
    let chunks: Vec<(usize, Vec<f64>)> = par::map_indexed(latent.frames, |t| {
        let (first_frame, span) = if t == 0 { (0, 1) } else { (1 + TUBE * (t - 1), TUBE) };
        let rows = if t == 0 { &basis.first } else { &basis.group };
        let n = span * FIRST_LEN;
        let mut buf = vec![0.0; span * frame_len];
        for py in 0..lh {
            for px in 0..lw {
                let s = (t * lh + py) * lw + px;
                let offs = gather_offsets(t, py, px, height, width);
                for c in 0..LATENT_CHANNELS {
                    let z = latent.data[c * plane + s];
                    if z == 0.0 {
                        continue;
                    }
                    let row = &rows[c * n..(c + 1) * n];
                    for (b, &o) in row.iter().zip(&offs) {
                        buf[o - first_frame * frame_len] += b * z;
                    }
                }
            }
        }
        (first_frame * frame_len, buf)
    });
    for (start, buf) in chunks {
        out[start..start + buf.len()].copy_from_slice(&buf);
    }
    out
}

/// Decodes a latent to a clip, clamping to `[0, 1]` at the output.
pub fn decode(latent: &LatentGrid, basis: &PatchBasis) -> Video {
    let (f, h, w) = latent.clip_dims();
    let mut data = decode_unclamped(latent, basis);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Video::from_parts_unchecked(f, h, w, data)
}

/// Gradient of a pixel-space loss with respect to the latent that was decoded.
/// `upstream` has video layout; the clamp passes gradient only where the
/// unclamped decode lies in `[0, 1]`.
pub fn decode_grad(latent: &LatentGrid, upstream: &[f64], basis: &PatchBasis) -> Result<LatentGrid> {
    let (f, h, w) = latent.clip_dims();
    if upstream.len() != f * h * w * CHANNELS {
        return Err(shape_err!(
            "upstream gradient length {} does not match decoded clip {f}x{h}x{w}x3",
            upstream.len()
        ));
    }
    let raw = reconstruct(latent, basis);
    let gated: Vec<f64> = raw
        .iter()
        .zip(upstream)
        .map(|(&u, &g)| if (0.0..=1.0).contains(&u) { g } else { 0.0 })
        .collect();
    Ok(project(&gated, f, h, w, basis))
}
