//! Two-stage face-focused training of the velocity network.
//!
//! Stage 1 fits the one-step flow in latent space against the cached
//! latents and latent masks. Stage 2 starts from a stage-1 checkpoint and
//! fine-tunes through the decoder in pixel space, adding the weighted
//! perceptual proxy.

mod cache;
mod loss;
mod optim;

pub use cache::{cache_latents, load_pairs, CachedClip, ClipPair, LatentCache};
pub use loss::{expected_masked_loss, masked_loss, percep_proxy, percep_proxy_raw, sample_b};
pub use optim::{Adam, AdamConfig};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_grad, decode_unclamped, PatchBasis};
use crate::error::{Error, Result};
use crate::flow::{one_step_restore, FlowConfig, VelocityNet};
use crate::media_io::{load_archive, save_archive, Archive, TensorEntry, Video};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Probability of the face-masked branch.
    pub p: f64,
    /// Weight of the perceptual proxy in stage 2.
    pub lambda_percep: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            lambda_percep: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Validation(format!("p={} outside [0, 1]", self.p)));
        }
        if !self.lambda_percep.is_finite() || self.lambda_percep < 0.0 {
            return Err(Error::Validation(format!(
                "lambda={} must be finite and non-negative",
                self.lambda_percep
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub adam: AdamConfig,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Checkpoint destination; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    pub flow: FlowConfig,
    /// Clip ids to train on; empty means the whole cache.
    pub clips: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            adam: AdamConfig::default(),
            batch: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            out: None,
            flow: FlowConfig::default(),
            clips: Vec::new(),
        }
    }
}

/// Network weights, optimizer moments and progress markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub adam: Adam,
    pub step: usize,
    pub stage: u8,
}

impl Checkpoint {
    /// A fresh, untrained checkpoint.
    pub fn init(seed: u64) -> Self {
        let mut net = VelocityNet::init(seed);
        net.round_to_f32();
        let n = net.params().len();
        Self {
            net,
            adam: Adam::new(n),
            step: 0,
            stage: 0,
        }
    }

    /// `net/*`, `opt/m/*`, `opt/v/*`, `opt/t`, `meta/step`, `meta/stage`.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for e in self.net.to_entries("net/") {
            a.push(e);
        }
        for (prefix, moments) in [("opt/m/", &self.adam.m), ("opt/v/", &self.adam.v)] {
            let as_net = VelocityNet::from_params(moments.clone()).expect("moment length");
            for e in as_net.to_entries(prefix) {
                a.push(e);
            }
        }
        a.push(TensorEntry::new("opt/t", vec![1], vec![self.adam.t as f32]));
        a.push(TensorEntry::new("meta/step", vec![1], vec![self.step as f32]));
        a.push(TensorEntry::new("meta/stage", vec![1], vec![self.stage as f32]));
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let scalar = |name: &str| -> Result<f32> {
            a.require(name)?
                .data
                .first()
                .copied()
                .ok_or_else(|| Error::Validation(format!("{name} is empty")))
        };
        let net = VelocityNet::from_archive(a, "net/")?;
        let m = VelocityNet::from_archive(a, "opt/m/")?.params().to_vec();
        let v = VelocityNet::from_archive(a, "opt/v/")?.params().to_vec();
        Ok(Self {
            net,
            adam: Adam {
                m,
                v,
                t: scalar("opt/t")? as u64,
            },
            step: scalar("meta/step")? as usize,
            stage: scalar("meta/stage")? as u8,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_archive(&self.to_archive(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&load_archive(path)?)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Batch-mean loss at every step.
    pub losses: Vec<f64>,
}

impl TrainRun {
    /// Mean of the `window` losses ending at `step` (1-based, inclusive).
    pub fn trailing_mean(&self, step: usize, window: usize) -> f64 {
        let end = step.min(self.losses.len());
        let start = end.saturating_sub(window);
        self.losses[start..end].iter().sum::<f64>() / (end - start).max(1) as f64
    }
}

/// HQ pixel targets by clip id for stage 2.
pub type PixelTargets = BTreeMap<String, Video>;

fn roster<'a>(cache: &'a LatentCache, ids: &[String]) -> Result<Vec<&'a CachedClip>> {
    if cache.is_empty() {
        return Err(Error::Validation("training cache is empty".into()));
    }
    if ids.is_empty() {
        return Ok(cache.clips.iter().collect());
    }
    ids.iter()
        .map(|id| {
            cache
                .get(id)
                .ok_or_else(|| Error::Validation(format!("clip {id:?} is not in the cache")))
        })
        .collect()
}

/// Independent RNG stream for one purpose.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_SWITCH: u64 = 2;

/// Per-element loss and parameter gradient.
type ElementGrad = Result<(f64, Vec<f64>)>;

fn run_loop<F>(cfg: &TrainConfig, loss_cfg: &LossConfig, mut ckpt: Checkpoint, n_clips: usize, element: F) -> Result<TrainRun>
where
    F: Fn(&VelocityNet, usize, bool) -> ElementGrad + Sync + Send,
{
    loss_cfg.validate()?;
    if cfg.batch == 0 {
        return Err(Error::Validation("batch must be positive".into()));
    }
    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut switch_rng = stream(cfg.seed, STREAM_SWITCH);
    let mut losses = Vec::with_capacity(cfg.steps);
    let n_params = ckpt.net.params().len();
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch).map(|_| data_rng.random_range(0..n_clips)).collect();
        let face = sample_b(&mut switch_rng, loss_cfg.p);
        let net = &ckpt.net;
        let results = par::map_slice(&picks, |&i| element(net, i, face));
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        ckpt.adam.step(&cfg.adam, ckpt.net.params_mut(), &grad);
        ckpt.step += 1;
        losses.push(loss);
        if (step + 1) % 100 == 0 {
            log::debug!("stage {} step {}: loss {loss:.6}", cfg.stage, step + 1);
        }
        if let Some(out) = &cfg.out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                ckpt.save(out)?;
            }
        }
    }
    if let Some(out) = &cfg.out {
        ckpt.save(out)?;
    }
    Ok(TrainRun {
        checkpoint: ckpt,
        losses,
    })
}

/// Stage 1: latent-space flow fitting with the stochastic face-focused loss.
pub fn train_stage1(cfg: &TrainConfig, loss_cfg: &LossConfig, cache: &LatentCache) -> Result<TrainRun> {
    let clips = roster(cache, &cfg.clips)?;
    let mut ckpt = Checkpoint::init(cfg.seed);
    ckpt.stage = 1;
    let flow = cfg.flow;
    run_loop(cfg, loss_cfg, ckpt, clips.len(), |net, i, face| {
        let clip = clips[i];
        let pred = one_step_restore(net, &clip.z_l, &flow)?;
        let (loss, g_pred) = masked_loss(clip.z_h.data(), pred.data(), clip.latent_mask.data(), face)?;
        let (t, h, w) = pred.dims();
        let upstream = crate::codec::LatentGrid::from_data(t, h, w, g_pred)?;
        let grads = net.backward(&clip.z_l, flow.t_star_discrete, &upstream)?;
        Ok((loss, grads.params))
    })
}

/// Pixel-space objective of one clip: face-focused loss plus the weighted
/// perceptual proxy, with its gradient with respect to the parameters when
/// `with_grad` is set.
#[allow(clippy::too_many_arguments)]
fn pixel_element(
    net: &VelocityNet,
    clip: &CachedClip,
    target: &Video,
    face: Option<bool>,
    loss_cfg: &LossConfig,
    flow: &FlowConfig,
    basis: &PatchBasis,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let z_hat = one_step_restore(net, &clip.z_l, flow)?;
    let raw = decode_unclamped(&z_hat, basis);
    let x_hat: Vec<f64> = raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let weights = clip.pixel_mask.to_pixel_weights();
    if x_hat.len() != target.data().len() {
        return Err(Error::Shape(format!("clip {}: target does not match decoded shape", clip.id)));
    }
    let (pix, g_pix) = match face {
        Some(b) => masked_loss(target.data(), &x_hat, &weights, b)?,
        None => {
            let (lf, gf) = masked_loss(target.data(), &x_hat, &weights, true)?;
            let (lg, gg) = masked_loss(target.data(), &x_hat, &weights, false)?;
            let p = loss_cfg.p;
            let g = gf.iter().zip(&gg).map(|(a, b)| p * a + (1.0 - p) * b).collect();
            (p * lf + (1.0 - p) * lg, g)
        }
    };
    let (per, g_per) = if loss_cfg.lambda_percep > 0.0 {
        percep_proxy_raw(&x_hat, target.data(), target.dims())?
    } else {
        (0.0, vec![0.0; x_hat.len()])
    };
    let loss = pix + loss_cfg.lambda_percep * per;
    if !with_grad {
        return Ok((loss, None));
    }
    let g_x: Vec<f64> = g_pix
        .iter()
        .zip(&g_per)
        .map(|(a, b)| a + loss_cfg.lambda_percep * b)
        .collect();
    let g_latent = decode_grad(&z_hat, &g_x, basis)?;
    let grads = net.backward(&clip.z_l, flow.t_star_discrete, &g_latent)?;
    Ok((loss, Some(grads.params)))
}

fn targets_for<'a>(clips: &[&CachedClip], targets: &'a PixelTargets) -> Result<Vec<&'a Video>> {
    clips
        .iter()
        .map(|c| {
            targets
                .get(&c.id)
                .ok_or_else(|| Error::Validation(format!("no HQ pixels for clip {:?}", c.id)))
        })
        .collect()
}

/// Stage 2: pixel-space fine-tuning through the decoder, starting from a
/// stage-1 checkpoint with fresh optimizer moments.
pub fn train_stage2(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    cache: &LatentCache,
    targets: &PixelTargets,
    stage1: &Checkpoint,
    basis: &PatchBasis,
) -> Result<TrainRun> {
    if stage1.stage != 1 {
        return Err(Error::Validation(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            stage1.stage
        )));
    }
    let clips = roster(cache, &cfg.clips)?;
    let hq = targets_for(&clips, targets)?;
    let ckpt = Checkpoint {
        net: stage1.net.clone(),
        adam: Adam::new(stage1.net.params().len()),
        step: stage1.step,
        stage: 2,
    };
    let flow = cfg.flow;
    run_loop(cfg, loss_cfg, ckpt, clips.len(), |net, i, face| {
        let (loss, grad) = pixel_element(net, clips[i], hq[i], Some(face), loss_cfg, &flow, basis, true)?;
        Ok((loss, grad.expect("gradient requested")))
    })
}

/// Mean over clips of the expected (over the Bernoulli switch) stage-2
/// objective.
pub fn pixel_objective(
    net: &VelocityNet,
    cache: &LatentCache,
    targets: &PixelTargets,
    loss_cfg: &LossConfig,
    flow: &FlowConfig,
    basis: &PatchBasis,
) -> Result<f64> {
    let clips = roster(cache, &[])?;
    let hq = targets_for(&clips, targets)?;
    let vals = par::map_indexed(clips.len(), |i| pixel_element(net, clips[i], hq[i], None, loss_cfg, flow, basis, false));
    let mut sum = 0.0;
    for v in vals {
        sum += v?.0;
    }
    Ok(sum / clips.len() as f64)
}

/// Mean over clips of the expected stage-1 objective.
pub fn latent_objective(net: &VelocityNet, cache: &LatentCache, loss_cfg: &LossConfig, flow: &FlowConfig) -> Result<f64> {
    let clips = roster(cache, &[])?;
    let vals = par::map_indexed(clips.len(), |i| -> Result<f64> {
        let c = clips[i];
        let pred = one_step_restore(net, &c.z_l, flow)?;
        expected_masked_loss(c.z_h.data(), pred.data(), c.latent_mask.data(), loss_cfg.p)
    });
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / clips.len() as f64)
}

/// Stage-2 objective of one clip with its parameter gradient, for a fixed
/// switch value. Exposed for gradient audits of the full decode chain.
pub fn pixel_loss_and_grad(
    net: &VelocityNet,
    clip: &CachedClip,
    target: &Video,
    face: bool,
    loss_cfg: &LossConfig,
    flow: &FlowConfig,
    basis: &PatchBasis,
) -> Result<(f64, Vec<f64>)> {
    let (l, g) = pixel_element(net, clip, target, Some(face), loss_cfg, flow, basis, true)?;
    Ok((l, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::make_basis;
    use crate::degrade::{degrade_clip, sample_params};
    use crate::media_io::synth_clip;

    fn small_cache(n: u64, identical: bool) -> (LatentCache, PixelTargets) {
        let b = make_basis();
        let pairs: Vec<ClipPair> = (0..n)
            .map(|s| {
                let (hq, masks) = synth_clip(s, 5, 16).unwrap();
                let lq = if identical { hq.clone() } else { degrade_clip(&hq, &sample_params(s)).unwrap() };
                ClipPair {
                    id: format!("c{s}"),
                    lq,
                    hq,
                    masks,
                }
            })
            .collect();
        let targets = pairs.iter().map(|p| (p.id.clone(), p.hq.clone())).collect();
        (cache_latents(&pairs, &b).unwrap(), targets)
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn identical_pairs_keep_zero_loss() {
        let (cache, _) = small_cache(3, true);
        let run = train_stage1(&quick(20), &LossConfig::default(), &cache).unwrap();
        assert!(run.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn stage1_is_bit_reproducible() {
        let (cache, _) = small_cache(3, false);
        let a = train_stage1(&quick(15), &LossConfig::default(), &cache).unwrap();
        let b = train_stage1(&quick(15), &LossConfig::default(), &cache).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.step, 15);
    }

    #[test]
    fn stage2_rejects_non_stage1_checkpoints() {
        let (cache, targets) = small_cache(2, false);
        let err = train_stage2(&quick(1), &LossConfig::default(), &cache, &targets, &Checkpoint::init(0), &make_basis()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn plain_pixel_mse_when_lambda_zero_and_global_branch() {
        let (cache, targets) = small_cache(1, false);
        let b = make_basis();
        let net = Checkpoint::init(1).net;
        let clip = &cache.clips[0];
        let cfg = LossConfig { p: 0.0, lambda_percep: 0.0 };
        let (l, _) = pixel_loss_and_grad(&net, clip, &targets[&clip.id], false, &cfg, &FlowConfig::default(), &b).unwrap();
        let x_hat = crate::codec::decode(&clip.z_l, &b);
        let hq = &targets[&clip.id];
        let mse = x_hat.data().iter().zip(hq.data()).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / hq.data().len() as f64;
        assert!((l - mse).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_archive_round_trip_is_exact() {
        let (cache, _) = small_cache(2, false);
        let run = train_stage1(&quick(5), &LossConfig::default(), &cache).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("c.vvt");
        run.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, run.checkpoint);
        let z = &cache.clips[0].z_l;
        assert_eq!(back.net.forward(z, 400).unwrap(), run.checkpoint.net.forward(z, 400).unwrap());
    }

    #[test]
    fn nan_inputs_trigger_divergence() {
        let (mut cache, _) = small_cache(1, false);
        cache.clips[0].z_h.data_mut()[0] = f64::NAN;
        let err = train_stage1(&quick(3), &LossConfig { p: 0.0, lambda_percep: 0.1 }, &cache).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
    }
}
