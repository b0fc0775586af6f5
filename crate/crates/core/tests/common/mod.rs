#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vividforge::codec::{make_basis, LatentGrid, PatchBasis};
use vividforge::curate::{assess_text, Arithmetic, Tier};
use vividforge::degrade::{degrade_clip, sample_params};
use vividforge::flow::{param_layout, FlowConfig, VelocityNet};
use vividforge::mask_align::{latent_mask, LatentMask};
use vividforge::media_io::synth_clip;
use vividforge::train::{cache_latents, pixel_loss_and_grad, ClipPair, LossConfig};
use vividforge::MaskStack;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Relative error with a small absolute floor so that vanishing gradients are
/// compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// A network with every parameter, including the head, randomised.
pub fn busy_net(seed: u64) -> VelocityNet {
    let mut net = VelocityNet::init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let head = param_layout()
        .into_iter()
        .filter(|p| p.name.starts_with("head"))
        .flat_map(|p| p.range())
        .collect::<Vec<_>>();
    for i in head {
        net.params_mut()[i] = rng.random_range(-0.3..0.3);
    }
    net
}

pub fn random_latent(seed: u64, frames: usize, height: usize, width: usize) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = LatentGrid::zeros(frames, height, width);
    z.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    z
}

/// Largest relative error between backprop and central differences over all
/// parameters and all input entries of `⟨u, v(z, t)⟩`.
pub fn audit_network(eps: f64) -> (f64, f64, usize) {
    let net = busy_net(11);
    let z = random_latent(12, 2, 4, 4);
    let u = random_latent(13, 2, 4, 4);
    let t = FlowConfig::default().t_star_discrete;
    let dot = |n: &VelocityNet, z: &LatentGrid| -> f64 {
        let out = n.forward(z, t).unwrap();
        out.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
    };
    let g = net.backward(&z, t, &u).unwrap();

    let mut worst_param = 0.0f64;
    let mut probe = net.clone();
    for i in 0..net.params().len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = dot(&probe, &z);
        probe.params_mut()[i] = orig - eps;
        let minus = dot(&probe, &z);
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst_param = worst_param.max(rel_err(g.params[i], numeric));
    }

    let mut worst_input = 0.0f64;
    let mut zp = z.clone();
    for i in 0..z.data().len() {
        let orig = zp.data()[i];
        zp.data_mut()[i] = orig + eps;
        let plus = dot(&net, &zp);
        zp.data_mut()[i] = orig - eps;
        let minus = dot(&net, &zp);
        zp.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst_input = worst_input.max(rel_err(g.input.data()[i], numeric));
    }
    (worst_param, worst_input, net.params().len())
}

/// Largest relative error of the stage-2 parameter gradient (latent flow,
/// decoder, clamp, masked loss and perceptual proxy) for both switch values.
pub fn audit_pixel_chain(eps: f64) -> f64 {
    let basis = make_basis();
    let (hq, masks) = synth_clip(21, 5, 16).unwrap();
    let lq = degrade_clip(&hq, &sample_params(21)).unwrap();
    let pair = ClipPair {
        id: "audit".into(),
        lq,
        hq: hq.clone(),
        masks,
    };
    let cache = cache_latents(&[pair], &basis).unwrap();
    let clip = &cache.clips[0];
    let loss_cfg = LossConfig::default();
    let flow = FlowConfig::default();
    let net = busy_net(22);

    let mut worst = 0.0f64;
    for face in [true, false] {
        let (_, grad) = pixel_loss_and_grad(&net, clip, &hq, face, &loss_cfg, &flow, &basis).unwrap();
        let mut probe = net.clone();
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let (plus, _) = pixel_loss_and_grad(&probe, clip, &hq, face, &loss_cfg, &flow, &basis).unwrap();
            probe.params_mut()[i] = orig - eps;
            let (minus, _) = pixel_loss_and_grad(&probe, clip, &hq, face, &loss_cfg, &flow, &basis).unwrap();
            probe.params_mut()[i] = orig;
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * eps)));
        }
    }
    worst
}

pub fn random_masks(rng: &mut impl Rng, frames: usize, height: usize, width: usize) -> MaskStack {
    let density: f64 = rng.random_range(0.0..1.0);
    let data = (0..frames * height * width)
        .map(|_| u8::from(rng.random_bool(density)))
        .collect();
    MaskStack::new(frames, height, width, data).unwrap()
}

/// Direct evaluation of the latent mask definition, element by element.
pub fn brute_force_latent_mask(m: &MaskStack) -> Vec<f64> {
    let (frames, h, w) = m.dims();
    let (tl, hl, wl) = (1 + (frames - 1) / 4, h / 8, w / 8);
    let mut out = vec![0.0; 16 * tl * hl * wl];
    for c in 0..16 {
        for t in 0..tl {
            for i in 0..hl {
                for j in 0..wl {
                    let sample = |f: usize| f64::from(m.at(f, 8 * i + 4, 8 * j + 4));
                    let v = if t == 0 {
                        sample(0)
                    } else {
                        (4 * t - 3..=4 * t).map(sample).fold(0.0, f64::max)
                    };
                    out[((c * tl + t) * hl + i) * wl + j] = v;
                }
            }
        }
    }
    out
}

/// Runs the mask pipeline against the brute-force definition on `cases`
/// random stacks; returns the number of mismatching stacks.
pub fn mask_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [8usize, 16, 32];
    let mut bad = 0;
    for _ in 0..cases {
        let t = 4 * rng.random_range(1..=4usize);
        let h = sizes[rng.random_range(0..3)];
        let w = sizes[rng.random_range(0..3)];
        let m = random_masks(&mut rng, t + 1, h, w);
        let got: LatentMask = latent_mask(&m).unwrap();
        if got.data() != brute_force_latent_mask(&m).as_slice() {
            bad += 1;
        }
    }
    bad
}

/// One entry of `fixtures/responses/expected.json`.
#[derive(Debug, serde::Deserialize)]
pub struct ExpectedResponse {
    pub kind: String,
    pub clarity: Option<i32>,
    pub stability: Option<i32>,
    pub lighting: Option<i32>,
    pub artifacts: Option<i32>,
    pub occlusion: Option<i32>,
    pub adjustments: Option<Vec<i32>>,
    pub base: Option<i32>,
    #[serde(rename = "final")]
    pub final_score: Option<i32>,
    pub tier: Option<Tier>,
    pub stated_final: Option<i32>,
}

pub fn expected_responses() -> std::collections::BTreeMap<String, ExpectedResponse> {
    let path = fixtures_dir().join("responses/expected.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks one fixture response against its expectation; returns a
/// description of the first discrepancy.
pub fn check_response(id: &str, exp: &ExpectedResponse) -> Result<(), String> {
    let path = fixtures_dir().join(format!("responses/{id}.txt"));
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let outcome = assess_text(&text);
    match exp.kind.as_str() {
        "malformed" => match outcome {
            Err(vividforge::Error::Parse(_)) => Ok(()),
            other => Err(format!("{id}: expected a parse error, got {other:?}")),
        },
        kind => {
            let v = outcome.map_err(|e| format!("{id}: {e}"))?;
            let r = &v.report;
            let scores = (r.clarity, r.stability, r.lighting, r.artifacts, r.occlusion);
            let want = (
                exp.clarity.unwrap(),
                exp.stability.unwrap(),
                exp.lighting.unwrap(),
                exp.artifacts.unwrap(),
                exp.occlusion.unwrap(),
            );
            if scores != want {
                return Err(format!("{id}: scores {scores:?} != {want:?}"));
            }
            let adj: Vec<i32> = r.adjustments.iter().map(|a| a.points).collect();
            if &adj != exp.adjustments.as_ref().unwrap() {
                return Err(format!("{id}: adjustments {adj:?}"));
            }
            if v.base != exp.base.unwrap() || v.final_score != exp.final_score.unwrap() {
                return Err(format!("{id}: recomputed {} / {}", v.base, v.final_score));
            }
            if Some(v.tier) != exp.tier {
                return Err(format!("{id}: tier {:?}", v.tier));
            }
            let want_arith = match kind {
                "valid" => Arithmetic::Ok,
                _ => Arithmetic::Mismatch {
                    expected: exp.final_score.unwrap(),
                    stated: exp.stated_final.unwrap(),
                },
            };
            if v.arithmetic != want_arith {
                return Err(format!("{id}: arithmetic {:?} != {want_arith:?}", v.arithmetic));
            }
            Ok(())
        }
    }
}

pub fn basis() -> PatchBasis {
    make_basis()
}
