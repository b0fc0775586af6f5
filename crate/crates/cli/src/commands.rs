use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use vividforge::codec::{encode as encode_clip, make_basis};
use vividforge::curate::{
    assess_all, assess_text, face_crop, filter_manifest, AssessmentBackend, AssessmentRequest, ClipAssessment,
    HttpBackend, MockBackend, DEFAULT_PARALLELISM, DEFAULT_THRESHOLD,
};
use vividforge::degrade::{degrade_clip, sample_params};
use vividforge::mask_align::latent_mask;
use vividforge::media_io::{load_clip, read_masks, save_archive, save_clip, synth_clip, write_clip, Archive, TensorEntry};
use vividforge::metrics::eval_pair;
use vividforge::restore::{read_clip_root, restore_clip};
use vividforge::train::{
    cache_latents, load_pairs, train_stage1, train_stage2, AdamConfig, Checkpoint, LatentCache, LossConfig,
    PixelTargets, TrainConfig,
};
use vividforge::Error;

use crate::config::{required, resolve, ConfigError};

fn log_resolved<T: Serialize>(command: &str, args: &T) {
    log::info!(
        "{command} config: {}",
        serde_json::to_string(args).unwrap_or_else(|_| "<unserializable>".into())
    );
}

/// Clip directories under `path`: the path itself when it holds `frames/`,
/// otherwise every subdirectory that does, sorted by name.
fn clip_roots(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.join("frames").is_dir() {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        return Ok(vec![(id, path.to_path_buf())]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for entry in entries {
        let entry = entry?;
        if entry.path().join("frames").is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("no clips found under {}", path.display())).into());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output root; clips are written to `<out>/clip_NNN`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of clips [default: 1].
    #[arg(long)]
    pub clips: Option<usize>,
    /// Frames per clip, of the form 1+4k [default: 9].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame height and width, a multiple of 8 [default: 64].
    #[arg(long)]
    pub size: Option<usize>,
    /// Base seed; clip i uses seed+i [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(flags: &SynthArgs, config: Option<&Path>) -> Result<()> {
    let mut a = resolve(flags, config)?;
    a.clips.get_or_insert(1);
    a.frames.get_or_insert(9);
    a.size.get_or_insert(64);
    a.seed.get_or_insert(0);
    log_resolved("synth", &a);
    let out = required(&a.out, "out")?;
    let (clips, frames, size, seed) = (a.clips.unwrap(), a.frames.unwrap(), a.size.unwrap(), a.seed.unwrap());
    for i in 0..clips {
        let (video, masks) = synth_clip(seed + i as u64, frames, size)?;
        save_clip(out.join(format!("clip_{i:03}")), &video, Some(&masks))?;
    }
    log::info!("wrote {clips} clips to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeArgs {
    /// A clip directory or a root of clip directories.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the sampled parameters and noise; clip i of a root uses seed+i [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blur sigma in pixels (overrides the sampled value).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Downscale factor (overrides the sampled value).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Noise std on the 0–255 scale (overrides the sampled value).
    #[arg(long)]
    pub noise: Option<f64>,
    /// Compression strength (overrides the sampled value).
    #[arg(long)]
    pub crf: Option<f64>,
}

pub fn degrade(flags: &DegradeArgs, config: Option<&Path>) -> Result<()> {
    let mut a = resolve(flags, config)?;
    a.seed.get_or_insert(0);
    log_resolved("degrade", &a);
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let single = input.join("frames").is_dir();
    for (i, (id, root)) in clip_roots(&input)?.into_iter().enumerate() {
        let mut params = sample_params(a.seed.unwrap() + i as u64);
        if let Some(v) = a.sigma {
            params.sigma = v;
        }
        if let Some(v) = a.scale {
            params.scale = v;
        }
        if let Some(v) = a.noise {
            params.noise = v;
        }
        if let Some(v) = a.crf {
            params.crf = v;
        }
        let video = read_clip_root(&root)?;
        let lq = degrade_clip(&video, &params)?;
        let dest = if single { out.clone() } else { out.join(&id) };
        save_clip(&dest, &lq, None)?;
        std::fs::write(dest.join("degrade.json"), serde_json::to_string_pretty(&params)?)?;
        log::info!("{id}: {}", serde_json::to_string(&params)?);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeArgs {
    /// A clip directory or a root of clip directories.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    /// Output archive (`z/<clip_id>` entries).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn encode(flags: &EncodeArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve(flags, config)?;
    log_resolved("encode", &a);
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let basis = make_basis();
    let mut archive = Archive::new();
    for (id, root) in clip_roots(&input)? {
        let z = encode_clip(&read_clip_root(&root)?, &basis)?;
        archive.push(TensorEntry::from_f64(format!("z/{id}"), z.shape().to_vec(), z.data()));
    }
    save_archive(&archive, &out)?;
    log::info!("wrote {} latents to {}", archive.entries.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskalignArgs {
    /// A mask directory, a clip directory with `masks/`, or a root of clips.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Output archive (`Mp/<clip_id>` and `Ml/<clip_id>` entries).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn mask_dirs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    if path.join("masks").is_dir() {
        return Ok(vec![(name(path).unwrap_or_else(|| "clip".into()), path.join("masks"))]);
    }
    let has_masks = std::fs::read_dir(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok())
        .any(|e| e.file_name().to_string_lossy().ends_with(".pgm"));
    if has_masks {
        // A bare mask directory is named after its clip when it sits in one.
        let id = match name(path).as_deref() {
            Some("masks") => path.parent().and_then(name),
            other => other.map(str::to_string),
        };
        return Ok(vec![(id.unwrap_or_else(|| "clip".into()), path.to_path_buf())]);
    }
    Ok(clip_roots(path)?
        .into_iter()
        .filter(|(_, root)| root.join("masks").is_dir())
        .map(|(id, root)| (id, root.join("masks")))
        .collect())
}

pub fn maskalign(flags: &MaskalignArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve(flags, config)?;
    log_resolved("maskalign", &a);
    let masks = required(&a.masks, "masks")?;
    let out = required(&a.out, "out")?;
    let mut archive = Archive::new();
    for (id, dir) in mask_dirs(&masks)? {
        let m = read_masks(&dir, None)?;
        let (f, h, w) = m.dims();
        let ml = latent_mask(&m)?;
        archive.push(TensorEntry::new(
            format!("Mp/{id}"),
            vec![f, h, w],
            m.data().iter().map(|&v| f32::from(v)).collect(),
        ));
        archive.push(TensorEntry::from_f64(format!("Ml/{id}"), ml.grid().shape().to_vec(), ml.data()));
    }
    save_archive(&archive, &out)?;
    log::info!("wrote {} mask entries to {}", archive.entries.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// 1: latent flow fitting, 2: pixel-space fine-tuning [default: 1].
    #[arg(long)]
    pub stage: Option<u8>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clips per step [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Optimizer steps [default: 2000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed of clip sampling and the loss switch [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability of the face-masked loss branch [default: 0.5].
    #[arg(long)]
    pub p: Option<f64>,
    /// Weight of the perceptual proxy in stage 2 [default: 0.1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dataset root with `hq/<id>/{frames,masks}` and `lq/<id>/frames`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Latent cache archive; built from `data_dir` and saved here when missing.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Also write the checkpoint every this many steps [default: 0, end only].
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn load_or_build_cache(a: &TrainArgs, pairs: Option<&[vividforge::train::ClipPair]>) -> Result<LatentCache> {
    if let Some(path) = &a.cache {
        if path.exists() {
            log::info!("reading latent cache {}", path.display());
            return Ok(LatentCache::from_archive(&vividforge::media_io::load_archive(path)?)?);
        }
    }
    let pairs = pairs.ok_or_else(|| ConfigError("either an existing --cache or --data-dir is required".into()))?;
    let cache = cache_latents(pairs, &make_basis())?;
    if let Some(path) = &a.cache {
        save_archive(&cache.to_archive(), path)?;
        log::info!("wrote latent cache for {} clips to {}", cache.len(), path.display());
    }
    Ok(cache)
}

pub fn train(flags: &TrainArgs, config: Option<&Path>) -> Result<()> {
    let mut a = resolve(flags, config)?;
    let defaults = TrainConfig::default();
    let loss_defaults = LossConfig::default();
    a.stage.get_or_insert(1);
    a.lr.get_or_insert(defaults.adam.lr);
    a.batch.get_or_insert(defaults.batch);
    a.steps.get_or_insert(defaults.steps);
    a.seed.get_or_insert(defaults.seed);
    a.p.get_or_insert(loss_defaults.p);
    a.lambda.get_or_insert(loss_defaults.lambda_percep);
    a.checkpoint_every.get_or_insert(0);
    log_resolved("train", &a);

    let out = required(&a.out, "out")?;
    let stage = a.stage.unwrap();
    let cfg = TrainConfig {
        stage,
        adam: AdamConfig {
            lr: a.lr.unwrap(),
            ..AdamConfig::default()
        },
        batch: a.batch.unwrap(),
        steps: a.steps.unwrap(),
        seed: a.seed.unwrap(),
        checkpoint_every: a.checkpoint_every.unwrap(),
        out: Some(out.clone()),
        ..defaults
    };
    let loss_cfg = LossConfig {
        p: a.p.unwrap(),
        lambda_percep: a.lambda.unwrap(),
    };
    let pairs = match &a.data_dir {
        Some(dir) => Some(load_pairs(dir)?),
        None => None,
    };
    let cache = load_or_build_cache(&a, pairs.as_deref())?;

    let run = match stage {
        1 => train_stage1(&cfg, &loss_cfg, &cache)?,
        2 => {
            let init = required(&a.init, "init")?;
            let pairs = pairs.ok_or_else(|| ConfigError("stage 2 needs --data-dir for pixel targets".into()))?;
            let targets: PixelTargets = pairs.into_iter().map(|p| (p.id, p.hq)).collect();
            let stage1 = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            train_stage2(&cfg, &loss_cfg, &cache, &targets, &stage1, &make_basis())?
        }
        s => return Err(ConfigError(format!("stage must be 1 or 2, got {s}")).into()),
    };
    let window = 100.min(run.losses.len());
    log::info!(
        "stage {stage}: {} steps, trailing loss {:.6}, checkpoint {}",
        run.losses.len(),
        run.trailing_mean(run.losses.len(), window),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Low-quality clip directory.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    /// Output clip directory (`<out>/frames`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn restore(flags: &RestoreArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve(flags, config)?;
    log_resolved("restore", &a);
    let ckpt = required(&a.ckpt, "ckpt")?;
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let calls = restore_clip(&ckpt, &input, &out)?;
    log::info!("restored {} with {calls} network evaluation(s)", input.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Reference clip or root of clips.
    #[arg(long = "ref")]
    #[serde(rename = "ref")]
    pub reference: Option<PathBuf>,
    /// Test clip or root of clips, matched to the reference by name.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn eval(flags: &EvalArgs, config: Option<&Path>) -> Result<()> {
    let a = resolve(flags, config)?;
    log_resolved("eval", &a);
    let reference = required(&a.reference, "ref")?;
    let test = required(&a.test, "test")?;
    let report = required(&a.report, "report")?;
    let summary = eval_pair(&reference, &test)?;
    std::fs::write(&report, serde_json::to_string_pretty(&summary.to_json())?)
        .with_context(|| format!("writing {}", report.display()))?;
    log::info!(
        "{} clips: mean PSNR {:.3} dB, mean SSIM {:.4}",
        summary.clips.len(),
        summary.mean_psnr,
        summary.mean_ssim
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateArgs {
    /// Root of clip directories to assess.
    #[arg(long)]
    pub clips: Option<PathBuf>,
    /// Chat-completion endpoint URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Directory of canned responses (`<clip_id>.txt`) used instead of the endpoint.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Keep clips whose recomputed final score exceeds this [default: 90].
    #[arg(long)]
    pub threshold: Option<i32>,
    /// Manifest JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name sent with each request [default: qwen2.5-vl].
    #[arg(long)]
    pub model: Option<String>,
    /// Requests in flight [default: 4].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// When set, face crops are written here and referenced in requests.
    #[arg(long)]
    pub crops: Option<PathBuf>,
}

/// First, middle and last frame of a clip.
fn sampled_frames(frames: usize) -> Vec<usize> {
    let mut idx = vec![0, frames / 2, frames.saturating_sub(1)];
    idx.dedup();
    idx
}

fn frame_refs(a: &CurateArgs, id: &str, root: &Path) -> Result<Vec<String>> {
    let (video, masks) = load_clip(root)?;
    let frames_dir = match (&a.crops, masks) {
        (Some(crops), Some(masks)) => {
            let dir = crops.join(id).join("frames");
            write_clip(&face_crop(&video, &masks)?, &dir)?;
            dir
        }
        (Some(_), None) => return Err(Error::Validation(format!("clip {id} has no masks to crop with")).into()),
        (None, _) => root.join("frames"),
    };
    Ok(sampled_frames(video.frames())
        .into_iter()
        .map(|f| frames_dir.join(format!("frame_{f:05}.ppm")).display().to_string())
        .collect())
}

pub fn curate(flags: &CurateArgs, config: Option<&Path>) -> Result<()> {
    let mut a = resolve(flags, config)?;
    a.threshold.get_or_insert(DEFAULT_THRESHOLD);
    a.model.get_or_insert_with(|| "qwen2.5-vl".into());
    a.parallelism.get_or_insert(DEFAULT_PARALLELISM);
    log_resolved("curate", &a);
    let clips = required(&a.clips, "clips")?;
    let out = required(&a.out, "out")?;
    let backend: Box<dyn AssessmentBackend> = match (&a.mock, &a.endpoint) {
        (Some(dir), _) => Box::new(MockBackend::new(dir)),
        (None, Some(url)) => Box::new(HttpBackend::new(url)?),
        (None, None) => return Err(ConfigError("one of --endpoint or --mock is required".into()).into()),
    };

    let model = a.model.clone().unwrap();
    let mut failures: BTreeMap<String, String> = BTreeMap::new();
    let mut requests = Vec::new();
    for (id, root) in clip_roots(&clips)? {
        match frame_refs(&a, &id, &root) {
            Ok(refs) => requests.push(AssessmentRequest::new(&model, &id, refs)),
            Err(e) => {
                log::warn!("{id}: {e:#}");
                failures.insert(id, format!("{e:#}"));
            }
        }
    }
    let batch = assess_all(backend.as_ref(), &requests, a.parallelism.unwrap());
    log::debug!("peak requests in flight: {}", batch.max_in_flight);

    let mut assessments: Vec<ClipAssessment> = failures
        .into_iter()
        .map(|(clip_id, msg)| ClipAssessment {
            clip_id,
            outcome: Err(msg),
        })
        .collect();
    for (req, resp) in requests.iter().zip(batch.responses) {
        let outcome = resp
            .and_then(|text| assess_text(&text))
            .map_err(|e| format!("{:#}", anyhow::Error::new(e)));
        if let Err(msg) = &outcome {
            log::warn!("{}: {msg}", req.clip_id);
        }
        assessments.push(ClipAssessment {
            clip_id: req.clip_id.clone(),
            outcome,
        });
    }
    assessments.sort_by(|x, y| x.clip_id.cmp(&y.clip_id));
    let manifest = filter_manifest(&assessments, a.threshold.unwrap());
    manifest.save(&out)?;
    log::info!(
        "{} of {} clips retained (final > {}), manifest {}",
        manifest.retained_ids().len(),
        manifest.entries.len(),
        manifest.threshold,
        out.display()
    );
    Ok(())
}
