//! One-step rectified flow and the velocity network.
//!
//! The straight path `z_t = (1 − t)·z_l + t·z_h` has constant velocity
//! `z_h − z_l`; restoration is a single Euler step from the degraded latent,
//! `ẑ_h = z_l + v(z_l, t*)`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{LatentGrid, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::media_io::{Archive, TensorEntry};

const C: usize = LATENT_CHANNELS;
/// Width of the pointwise hidden layer.
pub const HIDDEN: usize = 32;
/// Number of residual blocks.
pub const BLOCKS: usize = 2;
/// Length of the sinusoidal timestep embedding.
pub const EMBED_DIM: usize = 16;

static FORWARD_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of network forward evaluations.
pub fn forward_calls() -> usize {
    FORWARD_CALLS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub t_star_discrete: usize,
    pub num_discrete_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            t_star_discrete: 400,
            num_discrete_steps: 1000,
        }
    }
}

impl FlowConfig {
    /// Continuous target time.
    pub fn t_star(&self) -> f64 {
        self.t_star_discrete as f64 / self.num_discrete_steps as f64
    }
}

/// `z_t = (1 − t)·z_l + t·z_h`.
pub fn trajectory_point(z_l: &LatentGrid, z_h: &LatentGrid, t: f64) -> Result<LatentGrid> {
    z_l.same_shape(z_h)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Validation(format!("trajectory time {t} outside [0, 1]")));
    }
    let data = z_l
        .data()
        .iter()
        .zip(z_h.data())
        .map(|(&l, &h)| (1.0 - t) * l + t * h)
        .collect();
    let (f, y, x) = z_l.dims();
    LatentGrid::from_data(f, y, x, data)
}

/// `v = z_h − z_l`.
pub fn velocity_target(z_l: &LatentGrid, z_h: &LatentGrid) -> Result<LatentGrid> {
    z_l.same_shape(z_h)?;
    let data = z_h.data().iter().zip(z_l.data()).map(|(h, l)| h - l).collect();
    let (f, y, x) = z_l.dims();
    LatentGrid::from_data(f, y, x, data)
}

/// Sinusoidal embedding `[sin(t·ω_k), cos(t·ω_k)]`, `ω_k = 10000^(−k/8)`.
pub fn timestep_embedding(t_discrete: usize) -> Result<[f64; EMBED_DIM]> {
    if t_discrete >= 1000 {
        return Err(Error::Validation(format!("timestep {t_discrete} outside [0, 1000)")));
    }
    let t = t_discrete as f64;
    let mut e = [0.0; EMBED_DIM];
    for k in 0..EMBED_DIM / 2 {
        let omega = 10000f64.powf(-(k as f64) / 8.0);
        e[2 * k] = (t * omega).sin();
        e[2 * k + 1] = (t * omega).cos();
    }
    Ok(e)
}

/// Named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Parameter tensors in storage order.
pub fn param_layout() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, dims: Vec<usize>, fan_in: usize| {
        let len: usize = dims.iter().product();
        specs.push(ParamSpec {
            name,
            dims,
            offset,
            fan_in,
        });
        offset += len;
    };
    add("emb.weight".into(), vec![C, EMBED_DIM], EMBED_DIM);
    add("emb.bias".into(), vec![C], EMBED_DIM);
    for b in 0..BLOCKS {
        add(format!("block{b}.dw_spatial.weight"), vec![C, 3, 3], 9);
        add(format!("block{b}.dw_spatial.bias"), vec![C], 9);
        add(format!("block{b}.dw_temporal.weight"), vec![C, 3], 3);
        add(format!("block{b}.dw_temporal.bias"), vec![C], 3);
        add(format!("block{b}.pw1.weight"), vec![HIDDEN, C], C);
        add(format!("block{b}.pw1.bias"), vec![HIDDEN], C);
        add(format!("block{b}.pw2.weight"), vec![C, HIDDEN], HIDDEN);
        add(format!("block{b}.pw2.bias"), vec![C], HIDDEN);
    }
    add("head.weight".into(), vec![C, C], C);
    add("head.bias".into(), vec![C], C);
    specs
}

/// Total number of scalar parameters.
pub fn param_count() -> usize {
    param_layout().iter().map(ParamSpec::len).sum()
}

// Fixed offsets into the flat parameter vector.
const EMB_W: usize = 0;
const EMB_B: usize = EMB_W + C * EMBED_DIM;
const BLOCK0: usize = EMB_B + C;
const DWS_W: usize = 0;
const DWS_B: usize = DWS_W + C * 9;
const DWT_W: usize = DWS_B + C;
const DWT_B: usize = DWT_W + C * 3;
const PW1_W: usize = DWT_B + C;
const PW1_B: usize = PW1_W + HIDDEN * C;
const PW2_W: usize = PW1_B + HIDDEN;
const PW2_B: usize = PW2_W + C * HIDDEN;
const BLOCK_LEN: usize = PW2_B + C;
const HEAD_W: usize = BLOCK0 + BLOCKS * BLOCK_LEN;
const HEAD_B: usize = HEAD_W + C * C;
const TOTAL: usize = HEAD_B + C;

/// The velocity predictor: timestep injection, two depthwise-separable
/// residual blocks and a pointwise head.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    params: Vec<f64>,
}

/// Geometry of the latent being processed.
#[derive(Debug, Clone, Copy)]
struct Geom {
    frames: usize,
    height: usize,
    width: usize,
}

impl Geom {
    fn of(z: &LatentGrid) -> Self {
        let (frames, height, width) = z.dims();
        Self {
            frames,
            height,
            width,
        }
    }

    fn plane(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// Intermediate activations of one residual block.
struct BlockTape {
    input: Vec<f64>,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    hidden: Vec<f64>,
}

struct Tape {
    embedding: [f64; EMBED_DIM],
    blocks: Vec<BlockTape>,
    last: Vec<f64>,
}

/// Gradients of `⟨upstream, forward(z)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`VelocityNet::params`].
    pub params: Vec<f64>,
    pub input: LatentGrid,
}

fn depthwise_spatial(x: &[f64], w: &[f64], b: &[f64], g: Geom) -> Vec<f64> {
    let (hh, ww) = (g.height as isize, g.width as isize);
    let plane = g.plane();
    let mut out = vec![0.0; x.len()];
    for c in 0..C {
        let xc = &x[c * plane..(c + 1) * plane];
        let oc = &mut out[c * plane..(c + 1) * plane];
        let kc = &w[c * 9..c * 9 + 9];
        for t in 0..g.frames {
            for y in 0..hh {
                for xx in 0..ww {
                    let mut acc = b[c];
                    for dy in -1..=1isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= hh {
                            continue;
                        }
                        for dx in -1..=1isize {
                            let sx = xx + dx;
                            if sx < 0 || sx >= ww {
                                continue;
                            }
                            let k = ((dy + 1) * 3 + dx + 1) as usize;
                            acc += kc[k] * xc[(t * g.height + sy as usize) * g.width + sx as usize];
                        }
                    }
                    oc[(t * g.height + y as usize) * g.width + xx as usize] = acc;
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)` of the spatial depthwise conv.
fn depthwise_spatial_back(x: &[f64], w: &[f64], up: &[f64], g: Geom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (hh, ww) = (g.height as isize, g.width as isize);
    let plane = g.plane();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; C * 9];
    let mut gb = vec![0.0; C];
    for c in 0..C {
        let xc = &x[c * plane..(c + 1) * plane];
        let uc = &up[c * plane..(c + 1) * plane];
        let kc = &w[c * 9..c * 9 + 9];
        gb[c] = uc.iter().sum();
        let gxc = &mut gx[c * plane..(c + 1) * plane];
        for t in 0..g.frames {
            for y in 0..hh {
                for xx in 0..ww {
                    let u = uc[(t * g.height + y as usize) * g.width + xx as usize];
                    for dy in -1..=1isize {
                        let sy = y + dy;
                        if sy < 0 || sy >= hh {
                            continue;
                        }
                        for dx in -1..=1isize {
                            let sx = xx + dx;
                            if sx < 0 || sx >= ww {
                                continue;
                            }
                            let k = ((dy + 1) * 3 + dx + 1) as usize;
                            let si = (t * g.height + sy as usize) * g.width + sx as usize;
                            gw[c * 9 + k] += u * xc[si];
                            gxc[si] += u * kc[k];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn depthwise_temporal(x: &[f64], w: &[f64], b: &[f64], g: Geom) -> Vec<f64> {
    let area = g.height * g.width;
    let plane = g.plane();
    let mut out = vec![0.0; x.len()];
    for c in 0..C {
        for t in 0..g.frames {
            for s in 0..area {
                let mut acc = b[c];
                for k in 0..3 {
                    let st = t as isize + k as isize - 1;
                    if st >= 0 && (st as usize) < g.frames {
                        acc += w[c * 3 + k] * x[c * plane + st as usize * area + s];
                    }
                }
                out[c * plane + t * area + s] = acc;
            }
        }
    }
    out
}

fn depthwise_temporal_back(x: &[f64], w: &[f64], up: &[f64], g: Geom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let area = g.height * g.width;
    let plane = g.plane();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; C * 3];
    let mut gb = vec![0.0; C];
    for c in 0..C {
        for t in 0..g.frames {
            for s in 0..area {
                let u = up[c * plane + t * area + s];
                gb[c] += u;
                for k in 0..3 {
                    let st = t as isize + k as isize - 1;
                    if st >= 0 && (st as usize) < g.frames {
                        let si = c * plane + st as usize * area + s;
                        gw[c * 3 + k] += u * x[si];
                        gx[si] += u * w[c * 3 + k];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `out[o, s] = b[o] + Σ_i W[o, i]·x[i, s]`.
fn pointwise(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out * plane];
    for o in 0..n_out {
        let row = &mut out[o * plane..(o + 1) * plane];
        row.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..n_in {
            let wt = w[o * n_in + i];
            if wt == 0.0 {
                continue;
            }
            for (r, xv) in row.iter_mut().zip(&x[i * plane..(i + 1) * plane]) {
                *r += wt * xv;
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)` of [`pointwise`].
fn pointwise_back(
    x: &[f64],
    w: &[f64],
    up: &[f64],
    n_in: usize,
    n_out: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; n_in * plane];
    let mut gw = vec![0.0; n_out * n_in];
    let mut gb = vec![0.0; n_out];
    for o in 0..n_out {
        let uo = &up[o * plane..(o + 1) * plane];
        gb[o] = uo.iter().sum();
        for i in 0..n_in {
            let xi = &x[i * plane..(i + 1) * plane];
            gw[o * n_in + i] = uo.iter().zip(xi).map(|(u, v)| u * v).sum();
            let wt = w[o * n_in + i];
            for (g, u) in gx[i * plane..(i + 1) * plane].iter_mut().zip(uo) {
                *g += wt * u;
            }
        }
    }
    (gx, gw, gb)
}

impl VelocityNet {
    /// Seeded initialization: uniform in `±√(1/fan_in)` everywhere except the
    /// head, which starts at zero so the untrained restorer is the identity.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; TOTAL];
        for spec in param_layout() {
            if spec.name.starts_with("head.") {
                continue;
            }
            let bound = (1.0 / spec.fan_in as f64).sqrt();
            for p in &mut params[spec.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != TOTAL {
            return Err(Error::Validation(format!(
                "expected {TOTAL} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn block(&self, b: usize) -> &[f64] {
        let start = BLOCK0 + b * BLOCK_LEN;
        &self.params[start..start + BLOCK_LEN]
    }

    fn run(&self, z: &LatentGrid, t_discrete: usize, keep_tape: bool) -> Result<(LatentGrid, Option<Tape>)> {
        FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        let g = Geom::of(z);
        let plane = g.plane();
        let e = timestep_embedding(t_discrete)?;
        let p = &self.params;
        let mut h = z.data().to_vec();
        for c in 0..C {
            let shift = p[EMB_B + c]
                + (0..EMBED_DIM)
                    .map(|k| p[EMB_W + c * EMBED_DIM + k] * e[k])
                    .sum::<f64>();
            h[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += shift);
        }
        let mut tapes = Vec::new();
        for b in 0..BLOCKS {
            let w = self.block(b);
            let spatial = depthwise_spatial(&h, &w[DWS_W..DWS_B], &w[DWS_B..DWT_W], g);
            let temporal = depthwise_temporal(&spatial, &w[DWT_W..DWT_B], &w[DWT_B..PW1_W], g);
            let mut hidden = pointwise(&temporal, &w[PW1_W..PW1_B], &w[PW1_B..PW2_W], C, HIDDEN, plane);
            hidden.iter_mut().for_each(|v| *v = v.tanh());
            let delta = pointwise(&hidden, &w[PW2_W..PW2_B], &w[PW2_B..BLOCK_LEN], HIDDEN, C, plane);
            let next: Vec<f64> = h.iter().zip(&delta).map(|(a, d)| a + d).collect();
            if keep_tape {
                tapes.push(BlockTape {
                    input: std::mem::replace(&mut h, next),
                    spatial,
                    temporal,
                    hidden,
                });
            } else {
                h = next;
            }
        }
        let out = pointwise(&h, &p[HEAD_W..HEAD_B], &p[HEAD_B..TOTAL], C, C, plane);
        let tape = keep_tape.then_some(Tape {
            embedding: e,
            blocks: tapes,
            last: h,
        });
        Ok((LatentGrid::from_data(g.frames, g.height, g.width, out)?, tape))
    }

    /// Predicted velocity `v(z, t)`.
    pub fn forward(&self, z: &LatentGrid, t_discrete: usize) -> Result<LatentGrid> {
        Ok(self.run(z, t_discrete, false)?.0)
    }

    /// Exact gradients of `⟨upstream, forward(z, t)⟩` with respect to every
    /// parameter and to `z`.
    pub fn backward(&self, z: &LatentGrid, t_discrete: usize, upstream: &LatentGrid) -> Result<Gradients> {
        z.same_shape(upstream)?;
        let (_, tape) = self.run(z, t_discrete, true)?;
        let tape = tape.expect("tape requested");
        let g = Geom::of(z);
        let plane = g.plane();
        let p = &self.params;
        let mut grads = vec![0.0; TOTAL];

        let (mut gh, gw, gb) = pointwise_back(&tape.last, &p[HEAD_W..HEAD_B], upstream.data(), C, C, plane);
        grads[HEAD_W..HEAD_B].copy_from_slice(&gw);
        grads[HEAD_B..TOTAL].copy_from_slice(&gb);

        for (b, bt) in tape.blocks.iter().enumerate().rev() {
            let w = self.block(b);
            let base = BLOCK0 + b * BLOCK_LEN;
            let (mut g_hidden, gw2, gb2) = pointwise_back(&bt.hidden, &w[PW2_W..PW2_B], &gh, HIDDEN, C, plane);
            for (gv, hv) in g_hidden.iter_mut().zip(&bt.hidden) {
                *gv *= 1.0 - hv * hv;
            }
            let (g_temporal, gw1, gb1) = pointwise_back(&bt.temporal, &w[PW1_W..PW1_B], &g_hidden, C, HIDDEN, plane);
            let (g_spatial, gwt, gbt) = depthwise_temporal_back(&bt.spatial, &w[DWT_W..DWT_B], &g_temporal, g);
            let (g_in, gws, gbs) = depthwise_spatial_back(&bt.input, &w[DWS_W..DWS_B], &g_spatial, g);
            grads[base + DWS_W..base + DWS_B].copy_from_slice(&gws);
            grads[base + DWS_B..base + DWT_W].copy_from_slice(&gbs);
            grads[base + DWT_W..base + DWT_B].copy_from_slice(&gwt);
            grads[base + DWT_B..base + PW1_W].copy_from_slice(&gbt);
            grads[base + PW1_W..base + PW1_B].copy_from_slice(&gw1);
            grads[base + PW1_B..base + PW2_W].copy_from_slice(&gb1);
            grads[base + PW2_W..base + PW2_B].copy_from_slice(&gw2);
            grads[base + PW2_B..base + BLOCK_LEN].copy_from_slice(&gb2);
            // Residual path plus the block branch.
            for (a, d) in gh.iter_mut().zip(&g_in) {
                *a += d;
            }
        }

        for c in 0..C {
            let gs: f64 = gh[c * plane..(c + 1) * plane].iter().sum();
            grads[EMB_B + c] = gs;
            for k in 0..EMBED_DIM {
                grads[EMB_W + c * EMBED_DIM + k] = gs * tape.embedding[k];
            }
        }
        Ok(Gradients {
            params: grads,
            input: LatentGrid::from_data(g.frames, g.height, g.width, gh)?,
        })
    }

    /// Rounds every parameter to the nearest `f32` so checkpoints are exact.
    pub fn round_to_f32(&mut self) {
        self.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    /// Parameters as archive entries named `<prefix><tensor_name>`.
    pub fn to_entries(&self, prefix: &str) -> Vec<TensorEntry> {
        param_layout()
            .iter()
            .map(|s| TensorEntry::from_f64(format!("{prefix}{}", s.name), s.dims.clone(), &self.params[s.range()]))
            .collect()
    }

    pub fn from_archive(archive: &Archive, prefix: &str) -> Result<Self> {
        let mut params = vec![0.0; TOTAL];
        for s in param_layout() {
            let e = archive.require(&format!("{prefix}{}", s.name))?;
            if e.dims != s.dims {
                return Err(Error::Validation(format!(
                    "tensor {} has dims {:?}, expected {:?}",
                    e.name, e.dims, s.dims
                )));
            }
            params[s.range()].copy_from_slice(&e.to_f64());
        }
        Ok(Self { params })
    }
}

/// `ẑ_h = z_l + v(z_l, t*)`.
pub fn one_step_restore(net: &VelocityNet, z_l: &LatentGrid, cfg: &FlowConfig) -> Result<LatentGrid> {
    let v = net.forward(z_l, cfg.t_star_discrete)?;
    let data = z_l.data().iter().zip(v.data()).map(|(a, b)| a + b).collect();
    let (f, y, x) = z_l.dims();
    LatentGrid::from_data(f, y, x, data)
}
