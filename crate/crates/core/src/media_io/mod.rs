//! Clip ingestion and persistence, the `.vvt` tensor archive, and the
//! procedural face-clip generator used for desk-scale experiments.

mod archive;
mod pnm;
mod synth;

pub use archive::{load_archive, save_archive, Archive, TensorEntry, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use pnm::{load_clip, read_clip, read_masks, save_clip, write_clip, write_masks};
pub use synth::synth_clip;

use crate::error::{shape_err, Error, Result};

/// Number of colour channels per pixel.
pub const CHANNELS: usize = 3;

/// Checks the clip geometry shared by videos and masks: `1 + 4k` frames and
/// spatial dims divisible by 8.
pub fn check_clip_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames == 0 || !(frames - 1).is_multiple_of(4) {
        return Err(shape_err!("frame count {frames} is not of the form 1+4k"));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
        return Err(shape_err!("spatial dims {height}x{width} are not multiples of 8"));
    }
    Ok(())
}

/// An RGB clip of `1+T` frames, stored frame-major as `(f, y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub fps: u32,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_clip_dims(frames, height, width)?;
        if data.len() != frames * height * width * CHANNELS {
            return Err(shape_err!(
                "data length {} does not match {frames}x{height}x{width}x3",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
            fps: 25,
        })
    }

    /// A clip filled with a single value.
    pub fn constant(frames: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width * CHANNELS])
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

    /// `(frames, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    pub(crate) fn from_parts_unchecked(
        frames: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), frames * height * width * CHANNELS);
        Self {
            frames,
            height,
            width,
            data,
            fps: 25,
        }
    }

    pub(crate) fn same_shape(&self, other: &Video) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "clip shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }
}

/// Per-frame binary facial masks, `(f, y, x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskStack {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(shape_err!(
                "mask length {} does not match {frames}x{height}x{width}",
                data.len()
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0; frames * height * width],
        }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize) -> u8 {
        self.data[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.data[(f * self.height + y) * self.width + x] = v as u8;
    }

    /// Number of mask pixels set in frame `f`.
    pub fn frame_area(&self, f: usize) -> usize {
        let n = self.height * self.width;
        self.data[f * n..(f + 1) * n].iter().map(|&v| v as usize).sum()
    }

    /// Mask expanded to one weight per colour sample, matching a `Video` layout.
    pub fn to_pixel_weights(&self) -> Vec<f64> {
        self.data
            .iter()
            .flat_map(|&m| [m as f64; CHANNELS])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_dims_follow_latent_geometry() {
        assert!(check_clip_dims(9, 64, 64).is_ok());
        assert!(check_clip_dims(1, 8, 16).is_ok());
        assert!(matches!(check_clip_dims(8, 64, 64), Err(Error::Shape(_))));
        assert!(matches!(check_clip_dims(9, 60, 64), Err(Error::Shape(_))));
        assert!(matches!(check_clip_dims(0, 8, 8), Err(Error::Shape(_))));
    }

    #[test]
    fn video_rejects_out_of_range_values() {
        let err = Video::new(1, 8, 8, vec![1.5; 192]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn pixel_weights_repeat_per_channel() {
        let mut m = MaskStack::zeros(1, 8, 8);
        m.set(0, 0, 1, true);
        let w = m.to_pixel_weights();
        assert_eq!(w.len(), 192);
        assert_eq!(&w[0..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
