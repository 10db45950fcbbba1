//! Feature extractors.
//!
//! [`FeatureExtractor`] is the contract the trainer and the evaluator rely on:
//! a parameterized map from a face crop to an embedding, with an explicit
//! backward pass that accumulates parameter gradients. [`ToyBackbone`] is a
//! small convolutional implementation used for desk-scale experiments; any
//! other network can be plugged in by implementing the trait.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{FaceImage, CHANNELS, FACE_SIZE};
use crate::error::{Error, Result};
use crate::seeds::{rng_for, tag};

pub trait FeatureExtractor: Send + Sync {
    /// Intermediate values kept by [`forward`](Self::forward) for the backward pass.
    type Tape: Send + Sync;

    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, img: &FaceImage) -> (Vec<f64>, Self::Tape);
    /// Adds `d loss / d params` for one image into `grad_params`.
    fn backward(&self, tape: &Self::Tape, grad_embedding: &[f64], grad_params: &mut [f64]);
    fn set_training(&mut self, training: bool);
    fn is_training(&self) -> bool;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn embed(&self, img: &FaceImage) -> Vec<f64> {
        self.forward(img).0
    }
}

/// Layer sizes of a [`ToyBackbone`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Fixed average pooling applied to the 112 x 112 input.
    pub input_pool: usize,
    /// Output channels of each conv(3x3) + ReLU + avg-pool(2) stage.
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl BackboneConfig {
    /// ~100k parameters: 56x56 input, three stages, 64-d embedding.
    pub fn desk(dim: usize) -> Self {
        Self {
            input_pool: 2,
            channels: vec![8, 16, 32],
            dim,
        }
    }

    /// A few hundred parameters, for finite-difference checks.
    pub fn tiny(dim: usize) -> Self {
        Self {
            input_pool: 7,
            channels: vec![2, 3],
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be >= 2, got {}", self.dim)));
        }
        if self.input_pool == 0 || !FACE_SIZE.is_multiple_of(self.input_pool) {
            return Err(Error::Config(format!("input pool {} must divide 112", self.input_pool)));
        }
        let mut side = FACE_SIZE / self.input_pool;
        for &c in &self.channels {
            if c == 0 || !side.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "stage of {c} channels cannot pool a {side}x{side} map"
                )));
            }
            side /= 2;
        }
        Ok(())
    }

    fn input_side(&self) -> usize {
        FACE_SIZE / self.input_pool
    }

    fn flat_len(&self) -> usize {
        let side = self.input_side() >> self.channels.len();
        side * side * self.channels.last().copied().unwrap_or(CHANNELS)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    cin: usize,
    cout: usize,
    side: usize,
    w: usize,
    b: usize,
}

/// conv(3x3, pad 1) -> ReLU -> avg-pool(2) stages followed by a linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    config: BackboneConfig,
    params: Vec<f64>,
    #[serde(skip, default)]
    training: bool,
}

pub struct ToyTape {
    /// Input of every conv stage, zero-padded to `(side + 2)^2` per channel.
    padded: Vec<Vec<f64>>,
    /// Pre-activations of every conv stage.
    pre: Vec<Vec<f64>>,
    flat: Vec<f64>,
}

impl ToyTape {
    /// Pre-activations of every conv stage, in forward order.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

impl ToyBackbone {
    /// Seeded He-uniform initialization.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self {
            params: vec![0.0; 0],
            config,
            training: false,
        };
        let (layers, fc_w, fc_b, total) = net.layout();
        net.params = vec![0.0; total];
        let mut rng = rng_for(seed, &[tag::INIT]);
        for l in &layers {
            let bound = (6.0 / (9 * l.cin) as f64).sqrt();
            for v in &mut net.params[l.w..l.w + l.cout * l.cin * 9] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let flat = net.config.flat_len();
        let bound = (3.0 / flat as f64).sqrt();
        for v in &mut net.params[fc_w..fc_b] {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(net)
    }

    pub fn from_parts(config: BackboneConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut net = Self {
            config,
            params: Vec::new(),
            training: false,
        };
        let total = net.layout().3;
        if params.len() != total {
            return Err(Error::Shape(format!(
                "backbone expects {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite backbone parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn layout(&self) -> (Vec<ConvLayout>, usize, usize, usize) {
        let mut layers = Vec::new();
        let mut off = 0;
        let mut cin = CHANNELS;
        let mut side = self.config.input_side();
        for &cout in &self.config.channels {
            let w = off;
            let b = w + cout * cin * 9;
            off = b + cout;
            layers.push(ConvLayout { cin, cout, side, w, b });
            cin = cout;
            side /= 2;
        }
        let fc_w = off;
        let fc_b = fc_w + self.config.dim * self.config.flat_len();
        (layers, fc_w, fc_b, fc_b + self.config.dim)
    }

    fn pooled_input(&self, img: &FaceImage) -> Vec<f64> {
        let p = self.config.input_pool;
        let side = self.config.input_side();
        let mut out = vec![0.0; CHANNELS * side * side];
        let inv = 1.0 / (p * p) as f64;
        for c in 0..CHANNELS {
            let plane = img.plane(c);
            for y in 0..side {
                for x in 0..side {
                    let mut s = 0.0;
                    for dy in 0..p {
                        let row = &plane[(y * p + dy) * FACE_SIZE + x * p..][..p];
                        s += row.iter().sum::<f64>();
                    }
                    out[(c * side + y) * side + x] = s * inv;
                }
            }
        }
        out
    }
}

fn pad(input: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let ps = side + 2;
    let mut out = vec![0.0; channels * ps * ps];
    for c in 0..channels {
        for y in 0..side {
            let src = &input[(c * side + y) * side..][..side];
            out[c * ps * ps + (y + 1) * ps + 1..][..side].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward(l: &ConvLayout, padded: &[f64], params: &[f64]) -> Vec<f64> {
    let (s, ps) = (l.side, l.side + 2);
    let mut out = vec![0.0; l.cout * s * s];
    for oc in 0..l.cout {
        let dst = &mut out[oc * s * s..(oc + 1) * s * s];
        dst.fill(params[l.b + oc]);
        for ic in 0..l.cin {
            let src = &padded[ic * ps * ps..(ic + 1) * ps * ps];
            let w = &params[l.w + (oc * l.cin + ic) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wk = w[ky * 3 + kx];
                    for y in 0..s {
                        let row = &src[(y + ky) * ps + kx..][..s];
                        for (d, v) in dst[y * s..(y + 1) * s].iter_mut().zip(row) {
                            *d += wk * v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn relu_pool(pre: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let h = side / 2;
    let mut out = vec![0.0; channels * h * h];
    for c in 0..channels {
        let z = &pre[c * side * side..];
        for y in 0..h {
            for x in 0..h {
                let i = 2 * y * side + 2 * x;
                let s = z[i].max(0.0) + z[i + 1].max(0.0) + z[i + side].max(0.0) + z[i + side + 1].max(0.0);
                out[(c * h + y) * h + x] = 0.25 * s;
            }
        }
    }
    out
}

impl FeatureExtractor for ToyBackbone {
    type Tape = ToyTape;

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn set_training(&mut self, training: bool) {
        // no dropout or batch statistics; the flag is informational
        self.training = training;
    }

    fn is_training(&self) -> bool {
        self.training
    }

    fn forward(&self, img: &FaceImage) -> (Vec<f64>, ToyTape) {
        let (layers, fc_w, fc_b, _) = self.layout();
        let mut act = self.pooled_input(img);
        let mut padded_all = Vec::with_capacity(layers.len());
        let mut pre_all = Vec::with_capacity(layers.len());
        for l in &layers {
            let padded = pad(&act, l.cin, l.side);
            let pre = conv_forward(l, &padded, &self.params);
            act = relu_pool(&pre, l.cout, l.side);
            padded_all.push(padded);
            pre_all.push(pre);
        }
        let flat = act;
        let n = flat.len();
        let emb = (0..self.config.dim)
            .map(|k| {
                let row = &self.params[fc_w + k * n..fc_w + (k + 1) * n];
                self.params[fc_b + k] + row.iter().zip(&flat).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        (
            emb,
            ToyTape {
                padded: padded_all,
                pre: pre_all,
                flat,
            },
        )
    }

    fn backward(&self, tape: &ToyTape, grad_embedding: &[f64], grad: &mut [f64]) {
        let (layers, fc_w, fc_b, _) = self.layout();
        let n = tape.flat.len();
        let mut g_act = vec![0.0; n];
        for (k, &ge) in grad_embedding.iter().enumerate() {
            if ge == 0.0 {
                continue;
            }
            grad[fc_b + k] += ge;
            let gw = &mut grad[fc_w + k * n..fc_w + (k + 1) * n];
            for (g, x) in gw.iter_mut().zip(&tape.flat) {
                *g += ge * x;
            }
            let w = &self.params[fc_w + k * n..fc_w + (k + 1) * n];
            for (g, w) in g_act.iter_mut().zip(w) {
                *g += ge * w;
            }
        }
        for (li, l) in layers.iter().enumerate().rev() {
            let (s, ps, h) = (l.side, l.side + 2, l.side / 2);
            let pre = &tape.pre[li];
            // through avg-pool and ReLU
            let mut g_pre = vec![0.0; l.cout * s * s];
            for c in 0..l.cout {
                for y in 0..s {
                    for x in 0..s {
                        let i = (c * s + y) * s + x;
                        if pre[i] > 0.0 {
                            g_pre[i] = 0.25 * g_act[(c * h + y / 2) * h + x / 2];
                        }
                    }
                }
            }
            let padded = &tape.padded[li];
            let mut g_padded = if li > 0 { vec![0.0; l.cin * ps * ps] } else { Vec::new() };
            for oc in 0..l.cout {
                let gz = &g_pre[oc * s * s..(oc + 1) * s * s];
                grad[l.b + oc] += gz.iter().sum::<f64>();
                for ic in 0..l.cin {
                    let src = &padded[ic * ps * ps..(ic + 1) * ps * ps];
                    let widx = l.w + (oc * l.cin + ic) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0;
                            for y in 0..s {
                                let row = &src[(y + ky) * ps + kx..][..s];
                                acc += gz[y * s..(y + 1) * s].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                            }
                            grad[widx + ky * 3 + kx] += acc;
                            if li > 0 {
                                let wk = self.params[widx + ky * 3 + kx];
                                let dst = &mut g_padded[ic * ps * ps..(ic + 1) * ps * ps];
                                for y in 0..s {
                                    let d = &mut dst[(y + ky) * ps + kx..][..s];
                                    for (d, g) in d.iter_mut().zip(&gz[y * s..(y + 1) * s]) {
                                        *d += wk * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if li > 0 {
                let mut g_in = vec![0.0; l.cin * s * s];
                for c in 0..l.cin {
                    for y in 0..s {
                        g_in[(c * s + y) * s..][..s]
                            .copy_from_slice(&g_padded[c * ps * ps + (y + 1) * ps + 1..][..s]);
                    }
                }
                g_act = g_in;
            }
        }
    }
}

/// Linear softmax classifier on top of an embedding, used for pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    classes: usize,
    dim: usize,
    params: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT, 1]);
        let bound = (3.0 / dim as f64).sqrt();
        let mut params = vec![0.0; classes * dim + classes];
        for v in &mut params[..classes * dim] {
            *v = rng.gen_range(-bound..bound);
        }
        Self { classes, dim, params }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn logits(&self, emb: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.params[c * self.dim..(c + 1) * self.dim];
                self.params[self.classes * self.dim + c]
                    + row.iter().zip(emb).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Cross-entropy loss for one sample; accumulates head gradients into
    /// `grad_head` and returns `(loss, d loss / d embedding, predicted class)`.
    pub fn cross_entropy(&self, emb: &[f64], label: usize, grad_head: &mut [f64]) -> (f64, Vec<f64>, usize) {
        let logits = self.logits(emb);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = -(exps[label] / z).ln();
        let pred = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &l)| if l > logits[best] { i } else { best });
        let mut g_emb = vec![0.0; self.dim];
        for c in 0..self.classes {
            let g = exps[c] / z - if c == label { 1.0 } else { 0.0 };
            grad_head[self.classes * self.dim + c] += g;
            let row = &self.params[c * self.dim..(c + 1) * self.dim];
            let grow = &mut grad_head[c * self.dim..(c + 1) * self.dim];
            for k in 0..self.dim {
                grow[k] += g * emb[k];
                g_emb[k] += g * row[k];
            }
        }
        (loss, g_emb, pred)
    }
}
