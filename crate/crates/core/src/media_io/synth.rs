//! Procedural face clips: a moving, breathing head ellipse with darker eyes and
//! a mouth over a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::{check_clip_dims, MaskStack, Video, CHANNELS};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Background wave component: amplitude, spatial frequency vector, phase, drift.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: [f64; 3],
    kx: f64,
    ky: f64,
    phase: f64,
    drift: f64,
}

/// Generates a deterministic clip and its head mask from `seed`.
pub fn synth_clip(seed: u64, frames: usize, size: usize) -> Result<(Video, MaskStack)> {
    check_clip_dims(frames, size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    // Radii leave room for a ±4% per-frame deformation under the 0.35·size cap.
    let rx = s * rng.random_range(0.2..0.33);
    let ry = s * rng.random_range(0.2..0.33);
    let travel = s * rng.random_range(0.0..0.15);
    let heading = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (travel * heading.cos(), travel * heading.sin());
    let cx0 = s * (0.5 + rng.random_range(-0.025..0.025)) - dx / 2.0;
    let cy0 = s * (0.5 + rng.random_range(-0.025..0.025)) - dy / 2.0;
    let wobble_freq = rng.random_range(0.5..1.5);
    let wobble_phase = rng.random_range(0.0..2.0 * PI);

    let skin = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.45..0.62),
        rng.random_range(0.35..0.52),
    ];
    let eye = [0.12, 0.1, 0.1];
    let mouth = [
        rng.random_range(0.45..0.6),
        rng.random_range(0.15..0.25),
        rng.random_range(0.15..0.25),
    ];
    let skin_tex_k = rng.random_range(0.6..1.0);
    let base = [
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
        rng.random_range(0.3..0.6),
    ];
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let period = rng.random_range(10.0..40.0);
            let angle = rng.random_range(0.0..PI);
            let k = 2.0 * PI / period;
            Wave {
                amp: [
                    rng.random_range(0.03..0.08),
                    rng.random_range(0.03..0.08),
                    rng.random_range(0.03..0.08),
                ],
                kx: k * angle.cos(),
                ky: k * angle.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                drift: rng.random_range(-0.2..0.2),
            }
        })
        .collect();

    let mut data = vec![0.0; frames * size * size * CHANNELS];
    let mut masks = MaskStack::zeros(frames, size, size);
    let denom = (frames.max(2) - 1) as f64;
    for f in 0..frames {
        let progress = f as f64 / denom;
        let wob = 0.04 * (wobble_freq * f as f64 + wobble_phase).sin();
        let head = Ellipse {
            cx: cx0 + dx * progress,
            cy: cy0 + dy * progress,
            rx: rx * (1.0 + wob),
            ry: ry * (1.0 - wob),
        };
        let eyes = [-1.0, 1.0].map(|side| Ellipse {
            cx: head.cx + side * 0.38 * head.rx,
            cy: head.cy - 0.22 * head.ry,
            rx: 0.18 * head.rx,
            ry: 0.11 * head.ry,
        });
        let mouth_el = Ellipse {
            cx: head.cx,
            cy: head.cy + 0.45 * head.ry,
            rx: 0.38 * head.rx,
            ry: 0.1 * head.ry,
        };
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = [0.0; 3];
                let inside = head.contains(px, py);
                if inside {
                    // Soft top-left shading plus fine skin texture.
                    let shade = 1.0 - 0.15 * ((px - head.cx) / head.rx + (py - head.cy) / head.ry) / 2.0;
                    let tex = 0.03 * ((px - head.cx) * skin_tex_k).sin() * ((py - head.cy) * skin_tex_k).cos();
                    for c in 0..3 {
                        rgb[c] = skin[c] * shade + tex;
                    }
                    if eyes.iter().any(|e| e.contains(px, py)) {
                        rgb = eye;
                    } else if mouth_el.contains(px, py) {
                        rgb = mouth;
                    }
                } else {
                    for c in 0..3 {
                        rgb[c] = base[c]
                            + waves
                                .iter()
                                .map(|w| {
                                    w.amp[c]
                                        * (w.kx * px + w.ky * py + w.phase + w.drift * f as f64).sin()
                                })
                                .sum::<f64>();
                    }
                }
                let i = ((f * size + y) * size + x) * CHANNELS;
                for c in 0..3 {
                    data[i + c] = rgb[c].clamp(0.0, 1.0);
                }
                masks.set(f, y, x, inside);
            }
        }
    }
    Ok((Video::new(frames, size, size, data)?, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_clip(11, 9, 32).unwrap();
        let b = synth_clip(11, 9, 32).unwrap();
        assert_eq!(a, b);
        let c = synth_clip(12, 9, 32).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn shapes_follow_request() {
        let (v, m) = synth_clip(0, 9, 64).unwrap();
        assert_eq!(v.dims(), (9, 64, 64));
        assert_eq!(v.data().len(), 9 * 64 * 64 * 3);
        assert_eq!(m.dims(), (9, 64, 64));
    }

    #[test]
    fn invalid_dims_are_shape_errors() {
        assert!(matches!(synth_clip(0, 8, 64), Err(Error::Shape(_))));
        assert!(matches!(synth_clip(0, 9, 60), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_area_stays_between_ten_and_sixty_percent() {
        for seed in 0..100 {
            let (_, m) = synth_clip(seed, 9, 64).unwrap();
            for f in 0..9 {
                let frac = m.frame_area(f) as f64 / (64.0 * 64.0);
                assert!((0.1..=0.6).contains(&frac), "seed {seed} frame {f}: {frac}");
            }
        }
    }

    #[test]
    fn head_never_touches_the_border() {
        for seed in 0..100 {
            let (_, m) = synth_clip(seed, 9, 64).unwrap();
            for f in 0..9 {
                for i in 0..64 {
                    assert_eq!(m.at(f, 0, i) + m.at(f, 63, i) + m.at(f, i, 0) + m.at(f, i, 63), 0);
                }
            }
        }
    }
}
