//! Deterministic synthetic clips.
//!
//! A Gaussian blob drifts over a dim textured background. Species sets the
//! blob shape and the texture statistics. Seizure and pre-ictal clips add a
//! fast positional oscillation whose amplitude ramps up over the clip; the
//! oscillation is drawn from the same distribution for both species.
//!
//! All random draws happen in a fixed order regardless of condition, so two
//! clips with the same seed and species share background, trajectory and
//! noise and differ only by the oscillation.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClipBundle, ClipGeometry, ClipMeta, Species};
use crate::error::Result;
use crate::seeds;

struct Style {
    background: f64,
    texture_amp: f64,
    texture_freq: (f64, f64),
    sigma_major: (f64, f64),
    sigma_minor: (f64, f64),
    blob_amp: (f64, f64),
}

fn style(species: Species) -> Style {
    match species {
        Species::Rodent => Style {
            background: 0.10,
            texture_amp: 0.035,
            texture_freq: (0.12, 0.30),
            sigma_major: (3.0, 3.8),
            sigma_minor: (1.4, 1.9),
            blob_amp: (0.60, 0.80),
        },
        Species::Human => Style {
            background: 0.16,
            texture_amp: 0.025,
            texture_freq: (0.03, 0.10),
            sigma_major: (2.6, 3.2),
            sigma_minor: (2.2, 2.7),
            blob_amp: (0.55, 0.75),
        },
    }
}

/// Oscillation frequency range in cycles per frame; the upper half of the
/// temporal band starts at 0.25.
const JITTER_FREQ: (f64, f64) = (0.30, 0.42);
const JITTER_AMP: (f64, f64) = (1.6, 2.4);
const NOISE_STD: f64 = 0.008;

pub fn generate_synthetic_clip(meta: &ClipMeta, geometry: &ClipGeometry) -> Result<ClipBundle> {
    geometry.validate()?;
    meta.validate()?;
    let ClipGeometry {
        channels,
        frames,
        height,
        width,
    } = *geometry;
    let st = style(meta.species);
    let mut rng = seeds::rng(seeds::derive(meta.seed, "synthetic-clip"));
    let (w, h) = (width as f64, height as f64);

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.gen_range(st.texture_freq.0..st.texture_freq.1);
            let angle = rng.gen_range(0.0..TAU);
            let phase = rng.gen_range(0.0..TAU);
            let weight = rng.gen_range(0.5..1.0);
            (f * angle.cos(), f * angle.sin(), phase, weight)
        })
        .collect();
    let weight_sum: f64 = waves.iter().map(|w| w.3).sum();
    let channel_gain: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.85..1.15)).collect();

    let sigma_major = rng.gen_range(st.sigma_major.0..st.sigma_major.1);
    let sigma_minor = rng.gen_range(st.sigma_minor.0..st.sigma_minor.1);
    let orientation = rng.gen_range(0.0..TAU);
    let blob_amp = rng.gen_range(st.blob_amp.0..st.blob_amp.1);

    let start = (
        rng.gen_range(0.35 * w..0.65 * w),
        rng.gen_range(0.35 * h..0.65 * h),
    );
    let speed = rng.gen_range(0.04..0.15);
    let heading = rng.gen_range(0.0..TAU);
    let wander_amp = rng.gen_range(1.0..3.0);
    let wander_period = rng.gen_range(30.0..60.0);
    let wander_phase = rng.gen_range(0.0..TAU);

    let jitter_freq = rng.gen_range(JITTER_FREQ.0..JITTER_FREQ.1);
    let jitter_amp = rng.gen_range(JITTER_AMP.0..JITTER_AMP.1);
    let jitter_phase = rng.gen_range(0.0..TAU);
    let jitter_dir = rng.gen_range(0.0..TAU);
    let jitter_on = meta.condition.is_ictal_like();

    let (cos_o, sin_o) = (orientation.cos(), orientation.sin());
    let margin = 2.0;
    let reflect = |v: f64, hi: f64| {
        let span = hi - 2.0 * margin;
        let mut u = (v - margin).rem_euclid(2.0 * span);
        if u > span {
            u = 2.0 * span - u;
        }
        u + margin
    };

    let plane = height * width;
    let mut out = vec![0f32; geometry.numel()];
    for t in 0..frames {
        let tf = t as f64;
        let wander = wander_amp * (TAU * tf / wander_period + wander_phase).sin();
        let mut cx = start.0 + speed * tf * heading.cos() + wander * heading.sin();
        let mut cy = start.1 + speed * tf * heading.sin() - wander * heading.cos();
        if jitter_on {
            let ramp = if frames > 1 {
                0.2 + 0.8 * tf / (frames - 1) as f64
            } else {
                1.0
            };
            let osc = jitter_amp * ramp * (TAU * jitter_freq * tf + jitter_phase).sin();
            cx += osc * jitter_dir.cos();
            cy += osc * jitter_dir.sin();
        }
        let cx = reflect(cx, w);
        let cy = reflect(cy, h);

        for c in 0..channels {
            let base = (c * frames + t) * plane;
            for y in 0..height {
                for x in 0..width {
                    let (xf, yf) = (x as f64, y as f64);
                    let texture = waves
                        .iter()
                        .map(|&(fx, fy, ph, wt)| wt * (TAU * (fx * xf + fy * yf) + ph).sin())
                        .sum::<f64>()
                        / weight_sum;
                    let (dx, dy) = (xf - cx, yf - cy);
                    let along = dx * cos_o + dy * sin_o;
                    let across = -dx * sin_o + dy * cos_o;
                    let blob = blob_amp
                        * (-0.5
                            * (along * along / (sigma_major * sigma_major)
                                + across * across / (sigma_minor * sigma_minor)))
                            .exp();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = channel_gain[c] * (st.background + st.texture_amp * texture + blob)
                        + NOISE_STD * noise;
                    out[base + y * width + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    ClipBundle::new(meta.clone(), *geometry, out)
}
