//! Clip curation through an external multimodal assessor.
//!
//! The flow is: crop each clip to its face region, send the fixed rubric
//! prompt plus frame references to a chat endpoint, parse the structured
//! report, re-derive its arithmetic, and keep only clips whose recomputed
//! score exceeds the retention threshold.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::media_io::{MaskStack, Video, CHANNELS};

/// Retention threshold; a clip is kept only when its final score is strictly above it.
pub const DEFAULT_THRESHOLD: i32 = 90;
/// Default number of assessment requests in flight.
pub const DEFAULT_PARALLELISM: usize = 4;
/// Default number of retries after the first failed attempt.
pub const DEFAULT_RETRIES: usize = 3;

const PROMPT: &str = include_str!("../fixtures/prompt.txt");

/// The rubric prompt sent with every assessment request.
pub fn build_prompt() -> &'static str {
    PROMPT
}

/// Pixel bounds of a crop, half-open: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CropBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

/// Union bounding box of all face pixels, padded by 10% per side, clamped to
/// the frame and grown to even height and width.
pub fn face_box(masks: &MaskStack) -> Result<CropBox> {
    let (frames, h, w) = masks.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for f in 0..frames {
        for y in 0..h {
            for x in 0..w {
                if masks.at(f, y, x) == 0 {
                    continue;
                }
                bounds = Some(match bounds {
                    None => (y, y, x, x),
                    Some((a, b, c, d)) => (a.min(y), b.max(y), c.min(x), d.max(x)),
                });
            }
        }
    }
    let (ymin, ymax, xmin, xmax) = bounds.ok_or(Error::EmptyFace)?;
    let (y0, y1) = pad_axis(ymin, ymax + 1, h);
    let (x0, x1) = pad_axis(xmin, xmax + 1, w);
    Ok(CropBox { y0, y1, x0, x1 })
}

fn pad_axis(lo: usize, hi: usize, limit: usize) -> (usize, usize) {
    let pad = ((hi - lo) as f64 * 0.1).ceil() as usize;
    let mut lo = lo.saturating_sub(pad);
    let mut hi = (hi + pad).min(limit);
    if (hi - lo) % 2 == 1 {
        if hi < limit {
            hi += 1;
        } else {
            lo = lo.saturating_sub(1);
        }
    }
    (lo, hi)
}

/// Crops every frame of `video` to the face box derived from `masks`.
///
/// The result keeps the frame count but its spatial size is only guaranteed
/// to be even, so it is meant for inspection and export rather than for the
/// latent codec.
pub fn face_crop(video: &Video, masks: &MaskStack) -> Result<Video> {
    if video.dims() != masks.dims() {
        return Err(shape_err!(
            "mask shape {:?} does not match clip {:?}",
            masks.dims(),
            video.dims()
        ));
    }
    let b = face_box(masks)?;
    let mut data = Vec::with_capacity(video.frames() * b.height() * b.width() * CHANNELS);
    for f in 0..video.frames() {
        for y in b.y0..b.y1 {
            let start = video.index(f, y, b.x0, 0);
            data.extend_from_slice(&video.data()[start..start + b.width() * CHANNELS]);
        }
    }
    let mut out = Video::from_parts_unchecked(video.frames(), b.height(), b.width(), data);
    out.fps = video.fps;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Assessment transport

/// JSON body posted to the assessment endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRequest {
    pub model: String,
    pub prompt: String,
    pub clip_id: String,
    pub frame_refs: Vec<String>,
}

impl AssessmentRequest {
    pub fn new(model: &str, clip_id: &str, frame_refs: Vec<String>) -> Self {
        Self {
            model: model.to_string(),
            prompt: build_prompt().to_string(),
            clip_id: clip_id.to_string(),
            frame_refs,
        }
    }
}

/// Something that turns an assessment request into the assessor's raw text.
pub trait AssessmentBackend: Sync {
    fn complete(&self, request: &AssessmentRequest) -> Result<String>;
}

/// Chat endpoint reached over HTTP.
///
/// Transport failures and 5xx responses are retried with exponential
/// backoff; other HTTP errors fail immediately. The response may be plain
/// text or JSON carrying the completion in `choices[0].message.content`,
/// `choices[0].text`, `completion`, `text` or `content`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    retries: usize,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: &str) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Endpoint {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            client,
            retries: DEFAULT_RETRIES,
            backoff: Duration::from_millis(500),
        })
    }

    /// Overrides the retry budget and the first backoff delay (doubled per retry).
    pub fn with_retry(mut self, retries: usize, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, request: &AssessmentRequest) -> std::result::Result<String, Attempt> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}: {}", body.trim())));
        }
        Ok(extract_completion(&body))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl AssessmentBackend for HttpBackend {
    fn complete(&self, request: &AssessmentRequest) -> Result<String> {
        let mut delay = self.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(text) if text.trim().is_empty() => return Err(Error::EmptyResponse),
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(message)) => return Err(Error::Endpoint { attempts, message }),
                Err(Attempt::Retry(message)) => {
                    if attempts > self.retries {
                        return Err(Error::Endpoint { attempts, message });
                    }
                    log::warn!(
                        "assessment of {} failed ({message}); retrying in {:?}",
                        request.clip_id,
                        delay
                    );
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}

fn extract_completion(body: &str) -> String {
    let Ok(json) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.to_string();
    };
    let candidates = [
        "/choices/0/message/content",
        "/choices/0/text",
        "/completion",
        "/text",
        "/content",
    ];
    candidates
        .iter()
        .find_map(|p| json.pointer(p).and_then(|v| v.as_str()))
        .map(str::to_string)
        .unwrap_or_else(|| match json {
            serde_json::Value::String(s) => s,
            _ => body.to_string(),
        })
}

/// Offline backend answering from `<dir>/<clip_id>.txt`, optionally after a
/// fixed delay to emulate network latency.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dir: PathBuf,
    latency: Duration,
}

impl MockBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            latency: Duration::ZERO,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }
}

impl AssessmentBackend for MockBackend {
    fn complete(&self, request: &AssessmentRequest) -> Result<String> {
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let path = self.dir.join(format!("{}.txt", request.clip_id));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if text.trim().is_empty() {
            return Err(Error::EmptyResponse);
        }
        Ok(text)
    }
}

/// Sends one request for `clip_id`.
pub fn request_assessment(
    backend: &dyn AssessmentBackend,
    model: &str,
    clip_id: &str,
    frame_refs: Vec<String>,
) -> Result<String> {
    backend.complete(&AssessmentRequest::new(model, clip_id, frame_refs))
}

/// Outcome of a batch of requests, with the peak number in flight.
#[derive(Debug)]
pub struct BatchOutcome {
    pub responses: Vec<Result<String>>,
    pub max_in_flight: usize,
}

/// Runs all requests with at most `parallelism` in flight; responses come
/// back in request order.
pub fn assess_all(
    backend: &dyn AssessmentBackend,
    requests: &[AssessmentRequest],
    parallelism: usize,
) -> BatchOutcome {
    let workers = parallelism.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();

    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let out = backend.complete(req);
                in_flight.fetch_sub(1, Ordering::SeqCst);
                *slots[i].lock().expect("result slot poisoned") = Some(out);
            });
        }
    });

    BatchOutcome {
        responses: slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .expect("result slot poisoned")
                    .expect("every request is processed")
            })
            .collect(),
        max_in_flight: peak.load(Ordering::SeqCst),
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "Below Standard")]
    BelowStandard,
    Standard,
    High,
    Premium,
}

impl Tier {
    pub fn from_score(score: i32) -> Self {
        match score {
            s if s >= 85 => Tier::Premium,
            s if s >= 80 => Tier::High,
            s if s >= 75 => Tier::Standard,
            _ => Tier::BelowStandard,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let norm: String = s.chars().filter(|c| c.is_alphabetic()).collect();
        match norm.to_ascii_lowercase().as_str() {
            "premium" => Some(Tier::Premium),
            "high" | "highquality" => Some(Tier::High),
            "standard" => Some(Tier::Standard),
            "belowstandard" => Some(Tier::BelowStandard),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Premium => "Premium",
            Tier::High => "High",
            Tier::Standard => "Standard",
            Tier::BelowStandard => "Below Standard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjustment {
    pub points: i32,
    pub reason: String,
}

/// A report as stated by the assessor. Stated totals are kept verbatim;
/// [`verify_arithmetic`] re-derives them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub clarity: i32,
    pub stability: i32,
    pub lighting: i32,
    pub artifacts: i32,
    pub occlusion: i32,
    pub adjustments: Vec<Adjustment>,
    pub base: i32,
    #[serde(rename = "final")]
    pub final_score: i32,
    pub tier: Tier,
    pub motion_blur_note: String,
}

impl QualityReport {
    pub fn component_sum(&self) -> i32 {
        self.clarity + self.stability + self.lighting + self.artifacts + self.occlusion
    }

    pub fn adjustment_total(&self) -> i32 {
        self.adjustments.iter().map(|a| a.points).sum()
    }
}

struct Patterns {
    step: Regex,
    scores: [(Regex, &'static str, i32); 5],
    base: Regex,
    final_line: Regex,
    trailing_total: Regex,
    signed_points: Regex,
    total_adjustment: Regex,
    tier: Regex,
    motion: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| {
        let score = |name: &'static str, max: i32| {
            let re = Regex::new(&format!(
                r"(?im)^[\s*\-#]*{name}[\s*]*:[\s*]*([^\s/*]+)[\s*]*/[\s*]*{max}\b"
            ))
            .expect("valid score pattern");
            (re, name, max)
        };
        Patterns {
            step: Regex::new(r"(?im)^[\s*#]*STEP\s*([1-4])\b").unwrap(),
            scores: [
                score("Clarity", 35),
                score("Stability", 20),
                score("Lighting", 20),
                score("Artifacts", 15),
                score("Occlusion", 10),
            ],
            base: Regex::new(r"(?im)^[\s*\-]*Base Score[\s*]*=(.*)$").unwrap(),
            final_line: Regex::new(r"(?im)^[\s*\-]*Final Score[\s*]*=(.*)$").unwrap(),
            trailing_total: Regex::new(r"=\s*\**\s*(-?\d+)\s*\**\s*(?:/\s*100)?[\s*.]*$").unwrap(),
            signed_points: Regex::new(r"([+-])\s*(\d+)\s*points?\b").unwrap(),
            total_adjustment: Regex::new(r"(?i)total\s+adjustment").unwrap(),
            tier: Regex::new(r"(?im)^[\s*\-]*Quality Tier[\s*]*:[\s*]*\[?([A-Za-z \-]+)").unwrap(),
            motion: Regex::new(r"(?im)^[\s*\-]*Motion Blur Check[\s*]*:[\s*]*(.*)$").unwrap(),
        }
    })
}

/// Parses the assessor's output. Every one of the four STEP sections must be
/// present and every score must be an integer within its rubric range.
pub fn parse_report(text: &str) -> Result<QualityReport> {
    let p = patterns();
    let mut step_at = [None; 4];
    for c in p.step.captures_iter(text) {
        let n: usize = c[1].parse().expect("digit");
        let slot = &mut step_at[n - 1];
        if slot.is_none() {
            let m = c.get(0).expect("match");
            *slot = Some((m.start(), m.end()));
        }
    }
    for (i, s) in step_at.iter().enumerate() {
        if s.is_none() {
            return Err(Error::Parse(format!("missing STEP {} section", i + 1)));
        }
    }
    let step_at = step_at.map(|s| s.expect("checked above"));

    let mut scores = [0i32; 5];
    for (slot, (re, name, max)) in scores.iter_mut().zip(&p.scores) {
        let raw = re
            .captures(text)
            .ok_or_else(|| Error::Parse(format!("missing {name} score")))?;
        let value: i32 = raw[1]
            .parse()
            .map_err(|_| Error::Parse(format!("unparseable {name} score {:?}", &raw[1])))?;
        if !(0..=*max).contains(&value) {
            return Err(Error::Parse(format!("{name} score {value} outside 0..={max}")));
        }
        *slot = value;
    }

    let base = stated_total(text, &p.base, "base score")?;
    let final_score = stated_total(text, &p.final_line, "final score")?;

    let (_, step3_start) = step_at[2];
    let (step4_start, _) = step_at[3];
    let step3 = if step4_start > step3_start {
        &text[step3_start..step4_start]
    } else {
        &text[step3_start..]
    };
    let adjustments = step3
        .lines()
        .filter(|l| !p.total_adjustment.is_match(l))
        .filter_map(|l| {
            let c = p.signed_points.captures(l)?;
            let mag: i32 = c[2].parse().ok()?;
            let points = if &c[1] == "-" { -mag } else { mag };
            Some(Adjustment {
                points,
                reason: adjustment_reason(l),
            })
        })
        .collect();

    let tier_raw = p
        .tier
        .captures(text)
        .ok_or_else(|| Error::Parse("missing quality tier".into()))?;
    let tier = Tier::parse(&tier_raw[1])
        .ok_or_else(|| Error::Parse(format!("unknown quality tier {:?}", tier_raw[1].trim())))?;
    let motion_blur_note = p
        .motion
        .captures(text)
        .map(|c| c[1].trim().trim_matches('*').trim().to_string())
        .unwrap_or_default();

    let [clarity, stability, lighting, artifacts, occlusion] = scores;
    Ok(QualityReport {
        clarity,
        stability,
        lighting,
        artifacts,
        occlusion,
        adjustments,
        base,
        final_score,
        tier,
        motion_blur_note,
    })
}

fn stated_total(text: &str, line: &Regex, what: &str) -> Result<i32> {
    let rest = line
        .captures(text)
        .ok_or_else(|| Error::Parse(format!("missing {what} line")))?;
    let rest = rest[1].trim();
    // A line without any further '=' carries the value directly.
    let expr = if rest.contains('=') {
        rest.to_string()
    } else {
        format!("= {rest}")
    };
    let c = patterns()
        .trailing_total
        .captures(&expr)
        .ok_or_else(|| Error::Parse(format!("unparseable {what}: {rest:?}")))?;
    c[1].parse()
        .map_err(|_| Error::Parse(format!("unparseable {what}: {rest:?}")))
}

fn adjustment_reason(line: &str) -> String {
    let body = line.trim().trim_start_matches(['-', '*', ' ']);
    match body.split_once(':') {
        Some((_, reason)) if !reason.trim().is_empty() => reason.trim().to_string(),
        _ => body.trim_end_matches('*').trim().to_string(),
    }
}

// ---------------------------------------------------------------------------
// Verification and filtering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Arithmetic {
    Ok,
    /// Recomputed (`expected`) and stated totals disagree. Reported for the
    /// final score when it is off, otherwise for the base score.
    Mismatch { expected: i32, stated: i32 },
}

/// A report together with its recomputed totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verified {
    pub report: QualityReport,
    pub arithmetic: Arithmetic,
    pub base: i32,
    #[serde(rename = "final")]
    pub final_score: i32,
    pub tier: Tier,
}

/// Recomputes base and final scores and derives the tier from the recomputed
/// final, overriding whatever tier the assessor stated.
pub fn verify_arithmetic(report: &QualityReport) -> Verified {
    let base = report.component_sum();
    let final_score = base + report.adjustment_total();
    let arithmetic = if final_score != report.final_score {
        Arithmetic::Mismatch {
            expected: final_score,
            stated: report.final_score,
        }
    } else if base != report.base {
        Arithmetic::Mismatch {
            expected: base,
            stated: report.base,
        }
    } else {
        Arithmetic::Ok
    };
    Verified {
        report: report.clone(),
        arithmetic,
        base,
        final_score,
        tier: Tier::from_score(final_score),
    }
}

/// Parse and verify one raw response.
pub fn assess_text(text: &str) -> Result<Verified> {
    parse_report(text).map(|r| verify_arithmetic(&r))
}

/// Per-clip result fed to [`filter_manifest`]: a verified report or the
/// reason the clip could not be scored.
#[derive(Debug, Clone)]
pub struct ClipAssessment {
    pub clip_id: String,
    pub outcome: std::result::Result<Verified, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    #[serde(rename = "final")]
    pub final_score: Option<i32>,
    pub tier: Option<Tier>,
    pub retained: bool,
    pub arithmetic_mismatch: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub threshold: i32,
    pub entries: Vec<ManifestEntry>,
}

impl CurationManifest {
    pub fn retained_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.retained)
            .map(|e| e.clip_id.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

/// Keeps clips whose recomputed final score is strictly above `threshold`.
/// Unscorable clips stay in the manifest, flagged and never retained.
pub fn filter_manifest(assessments: &[ClipAssessment], threshold: i32) -> CurationManifest {
    let entries = assessments
        .iter()
        .map(|a| match &a.outcome {
            Ok(v) => ManifestEntry {
                clip_id: a.clip_id.clone(),
                final_score: Some(v.final_score),
                tier: Some(v.tier),
                retained: v.final_score > threshold,
                arithmetic_mismatch: v.arithmetic != Arithmetic::Ok,
                error: None,
            },
            Err(msg) => ManifestEntry {
                clip_id: a.clip_id.clone(),
                final_score: None,
                tier: None,
                retained: false,
                arithmetic_mismatch: false,
                error: Some(msg.clone()),
            },
        })
        .collect();
    CurationManifest { threshold, entries }
}
