//! Synthetic resolution degradation.
//!
//! A face crop is resized down to `r x r` and back up to 112 x 112 with a
//! separable Catmull-Rom (Keys, a = -0.5) kernel. On downscale the kernel is
//! stretched by the scale factor, which gives the usual area-weighted
//! anti-aliasing. Taps falling outside the image are dropped and the remaining
//! weights renormalized, so constant images stay constant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{rng_for, tag};
use rand::seq::SliceRandom;

/// Side length of every face crop.
pub const FACE_SIZE: usize = 112;
pub const CHANNELS: usize = 3;
const PLANE: usize = FACE_SIZE * FACE_SIZE;

/// Name of the resampling kernel, recorded in run manifests.
pub const KERNEL_NAME: &str = "catmull-rom(a=-0.5), support scaled by downscale factor, edge renormalized";

/// A 112 x 112 RGB crop with intensities in `[0, 1]`, stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    data: Vec<f64>,
    resolution: u32,
}

impl FaceImage {
    /// `data` is channel-planar: `data[c * 112 * 112 + y * 112 + x]`.
    pub fn from_planar(data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * PLANE {
            return Err(Error::Shape(format!(
                "expected {} values for a 112x112x3 image, got {}",
                CHANNELS * PLANE,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image contains non-finite values".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            data,
            resolution: FACE_SIZE as u32,
        })
    }

    pub fn constant(rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * PLANE);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), PLANE));
        }
        Self {
            data,
            resolution: FACE_SIZE as u32,
        }
    }

    /// Interleaved 8-bit RGB, row-major, as produced by image decoders.
    pub fn from_rgb8(pixels: &[u8]) -> Result<Self> {
        if pixels.len() != CHANNELS * PLANE {
            return Err(Error::Shape(format!(
                "expected {} bytes of RGB, got {}",
                CHANNELS * PLANE,
                pixels.len()
            )));
        }
        let mut data = vec![0.0; CHANNELS * PLANE];
        for (i, px) in pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * PLANE + i] = f64::from(px[c]) / 255.0;
            }
        }
        Ok(Self {
            data,
            resolution: FACE_SIZE as u32,
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHANNELS * PLANE);
        for i in 0..PLANE {
            for c in 0..3 {
                out.push((self.data[c * PLANE + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * PLANE..(c + 1) * PLANE]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * PLANE + y * FACE_SIZE + x]
    }

    /// Effective resolution the image carries (112 for originals).
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub(crate) fn with_data(data: Vec<f64>, resolution: u32) -> Self {
        debug_assert_eq!(data.len(), CHANNELS * PLANE);
        Self { data, resolution }
    }
}

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-pixel tap windows for one axis.
struct Taps {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let filterscale = scale.max(1.0);
    let support = 2.0 * filterscale;
    let mut start = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for i in 0..dst {
        let center = (i as f64 + 0.5) * scale;
        let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
        let hi = ((center + support + 0.5).floor() as usize).min(src);
        let mut w: Vec<f64> = (lo..hi)
            .map(|j| keys_cubic((j as f64 - center + 0.5) / filterscale))
            .collect();
        let total: f64 = w.iter().sum();
        if total != 0.0 {
            for v in &mut w {
                *v /= total;
            }
        }
        start.push(lo);
        weights.push(w);
    }
    Taps { start, weights }
}

/// Separable resize of one `sw x sh` plane to `dw x dh`.
pub fn resize_plane(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    let hx = taps(sw, dw);
    let mut tmp = vec![0.0; dw * sh];
    for y in 0..sh {
        let row = &src[y * sw..(y + 1) * sw];
        for x in 0..dw {
            let s = hx.start[x];
            tmp[y * dw + x] = hx.weights[x].iter().enumerate().map(|(k, w)| w * row[s + k]).sum();
        }
    }
    let hy = taps(sh, dh);
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        let s = hy.start[y];
        for (k, w) in hy.weights[y].iter().enumerate() {
            let src_row = &tmp[(s + k) * dw..(s + k + 1) * dw];
            let dst_row = &mut out[y * dw..(y + 1) * dw];
            for (d, v) in dst_row.iter_mut().zip(src_row) {
                *d += w * v;
            }
        }
    }
    out
}

pub fn validate_resolution(r: u32) -> Result<()> {
    if !(2..=FACE_SIZE as u32).contains(&r) {
        return Err(Error::Domain(format!("resolution {r} outside [2, 112]")));
    }
    Ok(())
}

/// Down-sample to `r x r` and back to 112 x 112. `r = 112` returns a copy.
pub fn degrade_image(img: &FaceImage, r: u32) -> Result<FaceImage> {
    validate_resolution(r)?;
    if r as usize == FACE_SIZE {
        return Ok(FaceImage::with_data(img.data.clone(), r));
    }
    let r = r as usize;
    let mut data = Vec::with_capacity(CHANNELS * PLANE);
    for c in 0..CHANNELS {
        let small = resize_plane(img.plane(c), FACE_SIZE, FACE_SIZE, r, r);
        let back = resize_plane(&small, r, r, FACE_SIZE, FACE_SIZE);
        data.extend(back.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(FaceImage::with_data(data, r as u32))
}

/// Draws one target resolution per image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSampler {
    choices: Vec<u32>,
    seed: u64,
}

impl ResolutionSampler {
    pub fn new(choices: Vec<u32>, seed: u64) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::Config("resolution sampler needs at least one choice".into()));
        }
        for &r in &choices {
            validate_resolution(r)?;
        }
        Ok(Self { choices, seed })
    }

    /// The default training choices {7, 14, 28}.
    pub fn training_default(seed: u64) -> Self {
        Self {
            choices: vec![7, 14, 28],
            seed,
        }
    }

    pub fn choices(&self) -> &[u32] {
        &self.choices
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw for image `index`; independent of evaluation order.
    pub fn draw(&self, index: u64) -> u32 {
        let mut rng = rng_for(self.seed, &[tag::DEGRADE, index]);
        *self.choices.choose(&mut rng).expect("nonempty")
    }
}

/// Degrades every image to an independently drawn resolution.
pub fn degrade_batch(images: &[FaceImage], sampler: &ResolutionSampler) -> Result<Vec<FaceImage>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| degrade_image(img, sampler.draw(i as u64)))
        .collect()
}

/// Mean absolute 4-neighbour Laplacian over interior pixels of all channels.
pub fn mean_abs_laplacian(img: &FaceImage) -> f64 {
    let n = FACE_SIZE;
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let p = img.plane(c);
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let v = 4.0 * p[y * n + x] - p[(y - 1) * n + x] - p[(y + 1) * n + x] - p[y * n + x - 1]
                    - p[y * n + x + 1];
                acc += v.abs();
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(cell: usize) -> FaceImage {
        let mut data = vec![0.0; CHANNELS * PLANE];
        for c in 0..3 {
            for y in 0..FACE_SIZE {
                for x in 0..FACE_SIZE {
                    data[c * PLANE + y * FACE_SIZE + x] = if (x / cell + y / cell).is_multiple_of(2) { 0.9 } else { 0.1 };
                }
            }
        }
        FaceImage::from_planar(data).unwrap()
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = FaceImage::constant([0.2, 0.5, 0.8]);
        for r in [2, 7, 14, 28, 56, 111] {
            let out = degrade_image(&img, r).unwrap();
            for c in 0..3 {
                let want = [0.2, 0.5, 0.8][c];
                assert!(out.plane(c).iter().all(|v| (v - want).abs() < 1e-6), "r={r}");
            }
        }
    }

    #[test]
    fn full_resolution_is_identity() {
        let img = checkerboard(3);
        let out = degrade_image(&img, 112).unwrap();
        assert_eq!(out.data(), img.data());
        assert_eq!(out.resolution(), 112);
    }

    #[test]
    fn out_of_range_resolution() {
        let img = FaceImage::constant([0.5; 3]);
        assert!(matches!(degrade_image(&img, 1), Err(Error::Domain(_))));
        assert!(matches!(degrade_image(&img, 113), Err(Error::Domain(_))));
        assert!(ResolutionSampler::new(vec![7, 200], 0).is_err());
        assert!(ResolutionSampler::new(vec![], 0).is_err());
    }

    #[test]
    fn attenuates_high_frequencies() {
        let img = checkerboard(1);
        let out = degrade_image(&img, 7).unwrap();
        assert!(mean_abs_laplacian(&out) < mean_abs_laplacian(&img));
        assert_eq!(out.resolution(), 7);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic() {
        let img = checkerboard(5);
        assert_eq!(degrade_image(&img, 14).unwrap(), degrade_image(&img, 14).unwrap());
    }

    #[test]
    fn kernel_weights_sum_to_one() {
        for (s, d) in [(112, 7), (7, 112), (112, 28), (13, 5)] {
            let t = taps(s, d);
            for w in &t.weights {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(keys_cubic(0.0), 1.0);
        assert_eq!(keys_cubic(1.0), 0.0);
        assert_eq!(keys_cubic(2.0), 0.0);
    }

    #[test]
    fn batch_alignment_and_sampler() {
        let imgs: Vec<FaceImage> = (0..5).map(|i| FaceImage::constant([i as f64 / 5.0; 3])).collect();
        let fixed = ResolutionSampler::new(vec![14], 3).unwrap();
        let out = degrade_batch(&imgs, &fixed).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|o| o.resolution() == 14));
        for (a, b) in imgs.iter().zip(&out) {
            assert!((a.get(0, 50, 50) - b.get(0, 50, 50)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_is_uniform() {
        let s = ResolutionSampler::training_default(42);
        let mut counts = [0usize; 3];
        for i in 0..3000 {
            let r = s.draw(i);
            counts[[7, 14, 28].iter().position(|&c| c == r).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn rgb8_roundtrip() {
        let bytes: Vec<u8> = (0..CHANNELS * PLANE).map(|i| (i % 251) as u8).collect();
        let img = FaceImage::from_rgb8(&bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }
}
