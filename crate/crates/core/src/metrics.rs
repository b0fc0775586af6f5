//! Reference-based quality metrics: PSNR over all samples and luma SSIM.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::media_io::{read_clip, Video, CHANNELS};
use crate::par;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Peak signal-to-noise ratio in dB with peak 1.0, averaged over every sample
/// of the clip.
pub fn psnr(reference: &Video, test: &Video) -> Result<f64> {
    reference.same_shape(test)?;
    Ok(psnr_from_mse(mse(reference.data(), test.data())))
}

fn gaussian_window() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        let r = (SSIM_WINDOW / 2) as f64;
        let g: Vec<f64> = (0..SSIM_WINDOW)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    })
}

fn luma(frame: &[f64]) -> Vec<f64> {
    frame
        .chunks_exact(CHANNELS)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Mean SSIM over all valid 11×11 windows of one luma plane pair.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let i = (y + dy) * w + x + dx;
                    let (va, vb) = (a[i], b[i]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
        }
    }
    total / (oh * ow) as f64
}

fn check_ssim_dims(v: &Video) -> Result<()> {
    if v.height() < SSIM_WINDOW || v.width() < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "frames of {}x{} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            v.height(),
            v.width()
        )));
    }
    Ok(())
}

/// Per-frame luma SSIM.
pub fn ssim_per_frame(reference: &Video, test: &Video) -> Result<Vec<f64>> {
    reference.same_shape(test)?;
    check_ssim_dims(reference)?;
    let (h, w) = (reference.height(), reference.width());
    Ok(par::map_indexed(reference.frames(), |f| {
        ssim_plane(&luma(reference.frame(f)), &luma(test.frame(f)), h, w)
    }))
}

/// Mean luma SSIM over windows and frames.
pub fn ssim(reference: &Video, test: &Video) -> Result<f64> {
    let per = ssim_per_frame(reference, test)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
}

/// Both metrics with per-frame breakdowns.
pub fn evaluate(reference: &Video, test: &Video) -> Result<EvalReport> {
    reference.same_shape(test)?;
    let per_frame_psnr = (0..reference.frames())
        .map(|f| psnr_from_mse(mse(reference.frame(f), test.frame(f))))
        .collect();
    let per_frame_ssim = ssim_per_frame(reference, test)?;
    Ok(EvalReport {
        psnr: psnr(reference, test)?,
        ssim: per_frame_ssim.iter().sum::<f64>() / per_frame_ssim.len() as f64,
        per_frame_psnr,
        per_frame_ssim,
    })
}

/// Clip-keyed reports plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub clips: BTreeMap<String, EvalReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalSummary {
    pub fn from_reports(clips: BTreeMap<String, EvalReport>) -> Self {
        let n = clips.len().max(1) as f64;
        let mean_psnr = clips.values().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = clips.values().map(|r| r.ssim).sum::<f64>() / n;
        Self {
            clips,
            mean_psnr,
            mean_ssim,
        }
    }

    /// `{clip_id: {psnr, ssim}, "mean": {psnr, ssim}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (id, r) in &self.clips {
            map.insert(id.clone(), serde_json::json!({ "psnr": r.psnr, "ssim": r.ssim }));
        }
        map.insert(
            "mean".into(),
            serde_json::json!({ "psnr": self.mean_psnr, "ssim": self.mean_ssim }),
        );
        serde_json::Value::Object(map)
    }
}

/// Clip ids under `root`: subdirectories holding a `frames/` directory, or
/// the root itself when it is a clip.
fn clip_dirs(root: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if root.join("frames").is_dir() {
        let id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "clip".into());
        out.insert(id, root.join("frames"));
        return Ok(out);
    }
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let frames = entry.path().join("frames");
        if frames.is_dir() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), frames);
        }
    }
    Ok(out)
}

/// Evaluates every clip of `test_root` against the same-named clip of
/// `ref_root`.
pub fn eval_pair(ref_root: impl AsRef<Path>, test_root: impl AsRef<Path>) -> Result<EvalSummary> {
    let refs = clip_dirs(ref_root.as_ref())?;
    let tests = clip_dirs(test_root.as_ref())?;
    let single = refs.len() == 1 && tests.len() == 1;
    if !single && refs.keys().ne(tests.keys()) {
        return Err(shape_err!(
            "clip sets differ: {:?} vs {:?}",
            refs.keys().collect::<Vec<_>>(),
            tests.keys().collect::<Vec<_>>()
        ));
    }
    let mut clips = BTreeMap::new();
    for ((id, rdir), tdir) in refs.iter().zip(tests.values()) {
        let r = read_clip(rdir)?;
        let t = read_clip(tdir)?;
        clips.insert(id.clone(), evaluate(&r, &t)?);
    }
    Ok(EvalSummary::from_reports(clips))
}
