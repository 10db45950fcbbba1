//! Photometric and geometric augmentation applied to HR crops before
//! degradation, so both halves of a pair show the same augmented view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{FaceImage, CHANNELS, FACE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness factor range, drawn uniformly.
    pub brightness: (f64, f64),
    /// Saturation factor range, drawn uniformly.
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: (0.8, 1.2),
            saturation: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
            saturation: (1.0, 1.0),
        }
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn horizontal_flip(img: &FaceImage) -> FaceImage {
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(FACE_SIZE) {
        row.reverse();
    }
    FaceImage::with_data(data, img.resolution())
}

/// Random flip, then brightness scaling, then saturation scaling around the
/// per-pixel luma. Output is clamped to `[0, 1]`.
pub fn augment<R: Rng>(img: &FaceImage, config: &AugmentConfig, rng: &mut R) -> FaceImage {
    let flip = rng.gen::<f64>() < config.flip_prob;
    let brightness = draw(rng, config.brightness);
    let saturation = draw(rng, config.saturation);
    let base = if flip { horizontal_flip(img) } else { img.clone() };
    if brightness == 1.0 && saturation == 1.0 {
        return base;
    }
    let plane = FACE_SIZE * FACE_SIZE;
    let src = base.data();
    let mut data = vec![0.0; CHANNELS * plane];
    for i in 0..plane {
        let rgb = [src[i] * brightness, src[plane + i] * brightness, src[2 * plane + i] * brightness];
        let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        for c in 0..3 {
            data[c * plane + i] = (luma + saturation * (rgb[c] - luma)).clamp(0.0, 1.0);
        }
    }
    FaceImage::with_data(data, img.resolution())
}
