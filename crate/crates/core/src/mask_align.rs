//! Transports pixel facial masks into latent geometry: nearest-neighbour 8×8
//! downsampling, first-frame passthrough with a 4-frame element-wise max
//! afterwards, then replication over the 16 latent channels.

use crate::codec::{LatentGrid, LATENT_CHANNELS, PATCH, TUBE};
use crate::error::{shape_err, Result};
use crate::media_io::MaskStack;

/// Offset of the sampled pixel inside each 8×8 cell.
pub const SAMPLE_OFFSET: usize = PATCH / 2;

/// A `(frames, h, w)` grid of mask weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskGrid {
    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize) -> f64 {
        self.data[(f * self.height + y) * self.width + x]
    }
}

/// Latent-aligned mask: a `LatentGrid` whose channel slices are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask(LatentGrid);

impl LatentMask {
    pub fn grid(&self) -> &LatentGrid {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_grid(self) -> LatentGrid {
        self.0
    }

    /// Wraps an existing grid, checking that all channel slices agree.
    pub fn from_grid(grid: LatentGrid) -> Result<Self> {
        let plane = grid.plane_len();
        let first = &grid.data()[..plane];
        for c in 1..LATENT_CHANNELS {
            if &grid.data()[c * plane..(c + 1) * plane] != first {
                return Err(shape_err!("latent mask channel {c} differs from channel 0"));
            }
        }
        Ok(Self(grid))
    }

    /// The single-channel `T'×H'×W'` slice.
    pub fn slice(&self) -> MaskGrid {
        let (frames, height, width) = self.0.dims();
        MaskGrid {
            frames,
            height,
            width,
            data: self.0.data()[..self.0.plane_len()].to_vec(),
        }
    }
}

/// `M̃[f, i, j] = M_p[f, 8i + 4, 8j + 4]`.
pub fn downsample_mask(masks: &MaskStack) -> Result<MaskGrid> {
    let (frames, h, w) = masks.dims();
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 {
        return Err(shape_err!("mask dims {h}x{w} are not multiples of {PATCH}"));
    }
    let (lh, lw) = (h / PATCH, w / PATCH);
    let mut data = Vec::with_capacity(frames * lh * lw);
    for f in 0..frames {
        for i in 0..lh {
            for j in 0..lw {
                data.push(masks.at(f, PATCH * i + SAMPLE_OFFSET, PATCH * j + SAMPLE_OFFSET) as f64);
            }
        }
    }
    Ok(MaskGrid {
        frames,
        height: lh,
        width: lw,
        data,
    })
}

/// Collapses `1+4k` frames to `1+k`: frame 0 passes through, each later
/// latent frame is the element-wise max of its four source frames.
pub fn temporal_align(grid: &MaskGrid) -> Result<MaskGrid> {
    if grid.frames == 0 || !(grid.frames - 1).is_multiple_of(TUBE) {
        return Err(shape_err!("mask frame count {} is not of the form 1+4k", grid.frames));
    }
    let lt = 1 + (grid.frames - 1) / TUBE;
    let plane = grid.height * grid.width;
    let mut data = Vec::with_capacity(lt * plane);
    data.extend_from_slice(&grid.data[..plane]);
    for i in 1..lt {
        for s in 0..plane {
            let m = (1..=TUBE)
                .map(|j| grid.data[(TUBE * (i - 1) + j) * plane + s])
                .fold(f64::NEG_INFINITY, f64::max);
            data.push(m);
        }
    }
    Ok(MaskGrid {
        frames: lt,
        height: grid.height,
        width: grid.width,
        data,
    })
}

/// Copies the aligned mask into all 16 latent channels.
pub fn replicate_channels(grid: &MaskGrid) -> LatentMask {
    let mut data = Vec::with_capacity(LATENT_CHANNELS * grid.data.len());
    for _ in 0..LATENT_CHANNELS {
        data.extend_from_slice(&grid.data);
    }
    LatentMask(
        LatentGrid::from_data(grid.frames, grid.height, grid.width, data)
            .expect("replicated length matches"),
    )
}

/// Full pipeline `M_p → M_l`.
pub fn latent_mask(masks: &MaskStack) -> Result<LatentMask> {
    Ok(replicate_channels(&temporal_align(&downsample_mask(masks)?)?))
}
