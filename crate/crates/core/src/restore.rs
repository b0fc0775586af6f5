//! One-step restoration of a low-quality clip: encode, a single velocity
//! evaluation, decode.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::codec::{decode, encode, PatchBasis};
use crate::error::Result;
use crate::flow::{FlowConfig, VelocityNet};
use crate::media_io::{read_clip, save_clip, Video};
use crate::train::Checkpoint;

/// A trained network bound to the codec, counting its forward passes.
#[derive(Debug)]
pub struct Restorer {
    net: VelocityNet,
    basis: PatchBasis,
    flow: FlowConfig,
    forward_calls: AtomicUsize,
}

impl Restorer {
    pub fn new(net: VelocityNet) -> Self {
        Self {
            net,
            basis: PatchBasis::new(),
            flow: FlowConfig::default(),
            forward_calls: AtomicUsize::new(0),
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(path)?.net))
    }

    pub fn with_flow(mut self, flow: FlowConfig) -> Self {
        self.flow = flow;
        self
    }

    /// Network evaluations performed so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// `x̂_h = D(z_l + v(z_l, t*))` with `z_l = E(x_l)`.
    pub fn restore(&self, lq: &Video) -> Result<Video> {
        let z_l = encode(lq, &self.basis)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let v = self.net.forward(&z_l, self.flow.t_star_discrete)?;
        let mut z_hat = z_l;
        z_hat.data_mut().iter_mut().zip(v.data()).for_each(|(z, d)| *z += d);
        Ok(decode(&z_hat, &self.basis))
    }
}

/// Reads a clip (either `<dir>/frames` or a bare frame directory).
pub fn read_clip_root(dir: impl AsRef<Path>) -> Result<Video> {
    let dir = dir.as_ref();
    let frames = dir.join("frames");
    if frames.is_dir() {
        read_clip(frames)
    } else {
        read_clip(dir)
    }
}

/// Restores the clip in `lq_dir` with the checkpoint at `ckpt` and writes
/// `<out_dir>/frames`. Returns the number of network evaluations used.
pub fn restore_clip(ckpt: impl AsRef<Path>, lq_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<usize> {
    let restorer = Restorer::from_checkpoint(ckpt)?;
    let lq = read_clip_root(lq_dir)?;
    let out = restorer.restore(&lq)?;
    save_clip(out_dir, &out, None)?;
    Ok(restorer.forward_calls())
}
