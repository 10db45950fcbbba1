//! Procedural face-style images for desk-scale experiments.
//!
//! Every identity has a fixed set of traits: skin and hair colour, face
//! shape, eye placement and a fine oriented skin texture. Images of one
//! identity differ by pose jitter, lighting, background, a colour cast and
//! sensor noise. The texture has a period of a few pixels, so it survives at
//! full resolution and vanishes after strong degradation, while colours and
//! shapes remain visible at every resolution.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::IdentityPool;
use crate::degrade::{FaceImage, CHANNELS, FACE_SIZE};
use crate::error::{Error, Result};
use crate::io::MemorySource;
use crate::seeds::{rng_for, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub seed: u64,
    /// Amplitude of the identity texture.
    pub texture_amplitude: f64,
    /// Spread of identity colours around a shared mean.
    pub colour_spread: f64,
    /// Per-image colour cast and lighting strength.
    pub nuisance: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 60,
            images_per_identity: 8,
            seed: 0,
            texture_amplitude: 0.12,
            colour_spread: 0.08,
            nuisance: 0.08,
            noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Traits {
    skin: [f64; 3],
    hair: [f64; 3],
    face_w: f64,
    face_h: f64,
    hairline: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_size: f64,
    mouth_w: f64,
    texture_angle: f64,
    texture_period: f64,
    texture_angle2: f64,
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

impl Traits {
    fn draw(rng: &mut ChaCha8Rng, spread: f64) -> Self {
        let skin_mean = [0.72, 0.55, 0.45];
        let hair_mean = [0.3, 0.22, 0.18];
        let mut jitter = |base: [f64; 3], s: f64| {
            let shared = rng.gen_range(-s..s);
            [0, 1, 2].map(|c| clamp01(base[c] + shared + rng.gen_range(-s..s) * 0.6))
        };
        let skin = jitter(skin_mean, spread);
        let hair = jitter(hair_mean, 2.0 * spread);
        Self {
            skin,
            hair,
            face_w: rng.gen_range(26.0..34.0),
            face_h: rng.gen_range(36.0..44.0),
            hairline: rng.gen_range(0.55..0.8),
            eye_dx: rng.gen_range(10.0..16.0),
            eye_y: rng.gen_range(-10.0..-4.0),
            eye_size: rng.gen_range(2.5..4.5),
            mouth_w: rng.gen_range(8.0..16.0),
            texture_angle: rng.gen_range(0.0..PI),
            texture_period: rng.gen_range(5.0..9.0),
            texture_angle2: rng.gen_range(0.0..PI),
        }
    }
}

fn render(t: &Traits, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> FaceImage {
    let n = FACE_SIZE * FACE_SIZE;
    let mut data = vec![0.0; CHANNELS * n];
    let cx = 56.0 + rng.gen_range(-3.0..3.0);
    let cy = 60.0 + rng.gen_range(-3.0..3.0);
    let scale = rng.gen_range(0.93..1.07);
    let bg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let cast = [0, 1, 2].map(|_| rng.gen_range(-cfg.nuisance..cfg.nuisance));
    let light_angle = rng.gen_range(0.0..2.0 * PI);
    let (lx, ly) = (light_angle.cos(), light_angle.sin());
    let light_gain = 1.0 + rng.gen_range(-cfg.nuisance..cfg.nuisance) * 2.0;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let phase2 = rng.gen_range(0.0..2.0 * PI);
    let (ka, kb) = (t.texture_angle.cos(), t.texture_angle.sin());
    let (kc, kd) = (t.texture_angle2.cos(), t.texture_angle2.sin());
    let freq = 2.0 * PI / t.texture_period;
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid std");
    let (fw, fh) = (t.face_w * scale, t.face_h * scale);
    for y in 0..FACE_SIZE {
        for x in 0..FACE_SIZE {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (dx / fw, dy / fh);
            let r_face = u * u + v * v;
            let mut rgb = bg;
            if r_face <= 1.0 {
                rgb = t.skin;
                let tex = (freq * (ka * dx + kb * dy) + phase).sin() + 0.6 * (freq * 1.3 * (kc * dx + kd * dy) + phase2).sin();
                for c in &mut rgb {
                    *c += cfg.texture_amplitude * tex * 0.6;
                }
                // eyes and mouth
                let ey = t.eye_y * scale;
                for side in [-1.0, 1.0] {
                    let ex = (dx - side * t.eye_dx * scale) / (t.eye_size * 1.6 * scale);
                    let eyy = (dy - ey) / (t.eye_size * scale);
                    if ex * ex + eyy * eyy <= 1.0 {
                        rgb = [0.12, 0.1, 0.1];
                    }
                }
                let my = (dy - 0.55 * fh) / (2.0 * scale);
                let mx = dx / (t.mouth_w * 0.5 * scale);
                if my * my + mx * mx <= 1.0 {
                    rgb = [0.55, 0.25, 0.25];
                }
            }
            // hair: a cap over the top of the face
            let hair_outer = u * u / 1.15 + v * v / 1.1;
            if v < -t.hairline + 0.3 && hair_outer <= 1.0 && (r_face > 1.0 || v < -t.hairline) {
                rgb = t.hair;
            }
            let shade = light_gain * (1.0 + 0.25 * cfg.nuisance / 0.08 * (lx * dx + ly * dy) / 80.0);
            for c in 0..CHANNELS {
                let val = (rgb[c] + cast[c]) * shade + noise.sample(rng);
                data[c * n + y * FACE_SIZE + x] = clamp01(val);
            }
        }
    }
    FaceImage::from_planar(data).expect("rendered image is valid")
}

/// An in-memory dataset with its identity index.
pub struct SynthDataset {
    pub source: MemorySource,
    pub pool: IdentityPool,
}

/// Renders `identities x images_per_identity` images named
/// `<prefix>NNNN/MM.png`. The same seed always yields the same pixels.
pub fn generate(config: &SynthConfig, prefix: &str) -> Result<SynthDataset> {
    if config.identities == 0 || config.images_per_identity == 0 {
        return Err(Error::Config("synthetic dataset needs identities and images".into()));
    }
    if config.noise < 0.0 || config.nuisance < 0.0 || config.colour_spread < 0.0 {
        return Err(Error::Config("synthetic dataset parameters must be nonnegative".into()));
    }
    let rendered: Vec<(String, String, FaceImage)> = (0..config.identities)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = rng_for(config.seed, &[tag::SYNTH, i as u64]);
            let traits = Traits::draw(&mut rng, config.colour_spread.max(1e-9));
            let name = format!("{prefix}{i:04}");
            (0..config.images_per_identity)
                .map(|j| {
                    let mut rng = rng_for(config.seed, &[tag::SYNTH, i as u64, j as u64 + 1]);
                    (name.clone(), format!("{name}/{j:02}.png"), render(&traits, config, &mut rng))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut source = MemorySource::new();
    let mut rows = Vec::with_capacity(rendered.len());
    for (id, reference, img) in rendered {
        source.insert(reference.clone(), &img);
        rows.push((id, reference));
    }
    Ok(SynthDataset {
        source,
        pool: IdentityPool::from_rows(rows),
    })
}
