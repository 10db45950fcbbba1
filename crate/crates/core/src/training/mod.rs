//! Octuplet fine-tuning and classification pre-training.

pub mod augment;
pub mod nn;
pub mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{build_epoch_batches, validate_batch_size, Batch, IdentityPool};
use crate::coremath::{DistanceMetric, Embedding};
use crate::degrade::{degrade_batch, FaceImage, ResolutionSampler};
use crate::error::{Error, Result};
use crate::eval::protocol::PairProtocol;
use crate::eval::verify::{evaluate_cross_resolution, EvalOptions};
use crate::io::ImageSource;
use crate::octuplet::{octuplet_loss_grad, CrossPositive, OctupletParams, PairedBatch, TermMask, TERM_NAMES};
use crate::seeds::{derive_seed, rng_for, tag};
use crate::triplet::{LabeledBatch, Margin};

use augment::{augment, AugmentConfig};
use nn::{BackboneConfig, ClassifierHead, FeatureExtractor, ToyBackbone};
use optim::{learning_rate_at, Optimizer, OptimizerKind, Preset};

/// Images per gradient-accumulation chunk. Chunks are reduced in index order,
/// so the summed gradient does not depend on the worker count.
const GRAD_CHUNK: usize = 8;

/// A desk-scale convolutional extractor with `d`-dimensional output.
pub fn toy_backbone(d: usize, seed: u64) -> Result<ToyBackbone> {
    ToyBackbone::new(BackboneConfig::desk(d), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub preset: Preset,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// 1-based epochs after which the learning rate is divided by 10.
    pub lr_decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub metric: DistanceMetric,
    pub normalize: bool,
    pub term_mask: TermMask,
    pub cross_positive: CrossPositive,
    /// Resolutions the LR half of each batch is drawn from.
    pub resolutions: Vec<u32>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub validations_per_epoch: usize,
    pub validation_resolutions: Vec<u32>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self::from_preset(Preset::AdagradDefault)
    }
}

/// Keys accepted by [`FineTuneConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "learning_rate",
    "lr_decay_epochs",
    "epochs",
    "batch_size",
    "margin",
    "metric",
    "normalize",
    "term_mask",
    "term_hh",
    "term_hl",
    "term_lh",
    "term_ll",
    "cross_positive",
    "resolutions",
    "seed",
    "flip_prob",
    "brightness",
    "saturation",
    "validations_per_epoch",
    "validation_resolutions",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?.as_slice() {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        _ => Err(Error::Config(format!("'{key}' expects 'low,high', got '{value}'"))),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
    }
}

impl FineTuneConfig {
    /// Preset values with the standard loss settings: margin 25,
    /// euclidean distance, no normalization, all four terms, B = 64.
    pub fn from_preset(preset: Preset) -> Self {
        let v = preset.values();
        Self {
            preset,
            optimizer: v.optimizer,
            learning_rate: v.learning_rate,
            lr_decay_epochs: v.lr_decay_epochs,
            epochs: v.epochs,
            batch_size: 64,
            margin: 25.0,
            metric: DistanceMetric::Euclidean,
            normalize: false,
            term_mask: TermMask::ALL,
            cross_positive: CrossPositive::default(),
            resolutions: vec![7, 14, 28],
            seed: 0,
            augment: AugmentConfig::default(),
            validations_per_epoch: 4,
            validation_resolutions: vec![7, 112],
        }
    }

    /// Sets one key from its string form. Setting `preset` resets the
    /// optimizer, learning rate, decay epochs and epoch count.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let preset: Preset = value.parse()?;
                let v = preset.values();
                self.preset = preset;
                self.optimizer = v.optimizer;
                self.learning_rate = v.learning_rate;
                self.lr_decay_epochs = v.lr_decay_epochs;
                self.epochs = v.epochs;
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_list(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "metric" => self.metric = value.parse()?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "term_mask" => self.term_mask = value.parse()?,
            "term_hh" | "term_hl" | "term_lh" | "term_ll" => {
                let on = parse_bool(key, value)?;
                let mut f = self.term_mask.flags();
                let i = TERM_NAMES.iter().position(|n| key.ends_with(n)).expect("known term key");
                f[i] = on;
                self.term_mask = TermMask::new(f[0], f[1], f[2], f[3]);
            }
            "cross_positive" => self.cross_positive = value.parse()?,
            "resolutions" => self.resolutions = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "flip_prob" => self.augment.flip_prob = parse(key, value)?,
            "brightness" => self.augment.brightness = parse_range(key, value)?,
            "saturation" => self.augment.saturation = parse_range(key, value)?,
            "validations_per_epoch" => self.validations_per_epoch = parse(key, value)?,
            "validation_resolutions" => self.validation_resolutions = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a key-value map, `preset` first.
    pub fn apply(&mut self, values: &BTreeMap<String, String>) -> Result<()> {
        if let Some(p) = values.get("preset") {
            self.set("preset", p)?;
        }
        for (k, v) in values.iter().filter(|(k, _)| k.as_str() != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("decay epochs {:?} must be strictly increasing", self.lr_decay_epochs));
        }
        validate_batch_size(self.batch_size)?;
        if self.batch_size < 4 {
            return fail(format!("batch size must be at least 4, got {}", self.batch_size));
        }
        Margin::new(self.margin)?;
        if !self.term_mask.any() {
            return fail("term mask selects no loss term".into());
        }
        ResolutionSampler::new(self.resolutions.clone(), 0)?;
        for &r in &self.validation_resolutions {
            crate::degrade::validate_resolution(r)?;
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) || a.brightness.0 < 0.0 || a.saturation.0 < 0.0 {
            return fail("augmentation parameters out of range".into());
        }
        Ok(())
    }

    pub fn loss_params(&self) -> Result<OctupletParams> {
        let mut p = OctupletParams::new(self.metric, Margin::new(self.margin)?, self.normalize, self.term_mask);
        p.cross_positive = self.cross_positive;
        Ok(p)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    /// `None` for masked-out terms.
    pub terms: [Option<f64>; 4],
    pub learning_rate: f64,
    /// Mean validation accuracy when validation ran after this step.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    /// `(resolution, accuracy)`.
    pub accuracies: Vec<(u32, f64)>,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub epoch_mean_loss: Vec<f64>,
    /// Wall-clock seconds per epoch. Not part of the CSV export, which stays
    /// byte-identical across repeated runs.
    pub epoch_seconds: Vec<f64>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,total_loss");
        for name in TERM_NAMES {
            out.push_str(&format!(",loss_{name}"));
        }
        out.push_str(",lr,val_accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.steps {
            out.push_str(&format!("{},{},{}", s.step, s.epoch, s.total));
            for t in s.terms {
                out.push_str(&format!(",{}", opt(t)));
            }
            out.push_str(&format!(",{},{}\n", s.learning_rate, opt(s.validation)));
        }
        out
    }
}

/// Held-out pairs used for periodic validation.
pub struct Validation<'a> {
    pub protocol: &'a PairProtocol,
    pub source: &'a dyn ImageSource,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub step: usize,
    pub epoch: usize,
    pub accuracy: f64,
    pub params: Vec<f64>,
}

pub struct FineTuneOutcome<M> {
    pub model: M,
    pub history: TrainingHistory,
    /// Parameters at the best validation accuracy, if validation ran.
    pub best: Option<BestSnapshot>,
}

fn load_batch(source: &dyn ImageSource, batch: &Batch) -> Result<Vec<FaceImage>> {
    batch.par_iter().map(|item| source.load(&item.reference)).collect()
}

/// Runs forward and backward over `images` with per-image output gradients
/// from `grad_fn`, summing parameter gradients in a fixed order.
fn accumulate_grads<M: FeatureExtractor>(model: &M, tapes: &[M::Tape], grads: &[Vec<f64>]) -> Vec<f64> {
    let n = model.num_params();
    let partial: Vec<Vec<f64>> = tapes
        .par_chunks(GRAD_CHUNK)
        .zip(grads.par_chunks(GRAD_CHUNK))
        .map(|(tc, gc)| {
            let mut acc = vec![0.0; n];
            for (t, g) in tc.iter().zip(gc) {
                if g.iter().any(|v| *v != 0.0) {
                    model.backward(t, g, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; n];
    for p in &partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn forward_all<M: FeatureExtractor>(model: &M, images: &[FaceImage]) -> (Vec<Vec<f64>>, Vec<M::Tape>) {
    images.par_iter().map(|img| model.forward(img)).unzip()
}

fn to_batch(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<LabeledBatch> {
    let embeddings = embeddings
        .into_iter()
        .map(|e| {
            if e.iter().all(|v| v.is_finite()) {
                Embedding::new(e)
            } else {
                Err(Error::Numeric("non-finite embedding".into()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledBatch::new(embeddings, labels)
}

fn diagnostic(model_params: &[f64], epoch: usize, step: usize, lr: f64, what: &str) -> Error {
    let norm = model_params.iter().map(|p| p * p).sum::<f64>().sqrt();
    let bad = model_params.iter().filter(|p| !p.is_finite()).count();
    Error::Numeric(format!(
        "{what} at epoch {epoch}, step {step} (lr {lr:e}); parameter norm {norm}, {bad} non-finite parameters"
    ))
}

/// Validation steps of an epoch with `n` batches: `k` roughly evenly spaced
/// 1-based batch positions, always including the last.
fn validation_points(n: usize, k: usize) -> Vec<usize> {
    let mut pts: Vec<usize> = (1..=k).map(|i| (i * n).div_ceil(k)).filter(|&p| p > 0).collect();
    pts.dedup();
    pts
}

fn validate_model<M: FeatureExtractor>(
    model: &M,
    v: &Validation<'_>,
    resolutions: &[u32],
) -> Result<Vec<(u32, f64)>> {
    let opts = EvalOptions {
        far_targets: Vec::new(),
        ..EvalOptions::default()
    };
    let rep = evaluate_cross_resolution(model, v.protocol, v.source, resolutions, &opts)?;
    Ok(rep.results.iter().map(|r| (r.resolution, r.accuracy)).collect())
}

/// Fine-tunes `model` with the octuplet loss.
///
/// Every step augments the HR images of one batch, degrades them to
/// per-image resolutions, embeds all 2B images with the shared extractor,
/// back-propagates the masked octuplet loss and applies one optimizer step.
pub fn fine_tune<M: FeatureExtractor>(
    mut model: M,
    pool: &IdentityPool,
    source: &dyn ImageSource,
    validation: Option<Validation<'_>>,
    config: &FineTuneConfig,
) -> Result<FineTuneOutcome<M>> {
    config.validate()?;
    let params = config.loss_params()?;
    let mut optimizer = Optimizer::new(config.optimizer, model.num_params());
    let mut pool = pool.clone();
    let mut history = TrainingHistory::default();
    let mut best: Option<BestSnapshot> = None;
    let mut step = 0usize;
    model.set_training(true);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = learning_rate_at(config.learning_rate, &config.lr_decay_epochs, epoch);
        let batches = build_epoch_batches(&mut pool, config.batch_size, derive_seed(config.seed, &[epoch as u64]))?;
        let checkpoints = if validation.is_some() && config.validations_per_epoch > 0 {
            validation_points(batches.len(), config.validations_per_epoch)
        } else {
            Vec::new()
        };
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            step += 1;
            let hr_images: Vec<FaceImage> = load_batch(source, batch)?
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    let mut rng = rng_for(config.seed, &[tag::AUGMENT, step as u64, i as u64]);
                    augment(img, &config.augment, &mut rng)
                })
                .collect();
            let sampler = ResolutionSampler::new(
                config.resolutions.clone(),
                derive_seed(config.seed, &[tag::DEGRADE, step as u64]),
            )?;
            let lr_images = degrade_batch(&hr_images, &sampler)?;
            let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();

            let b = hr_images.len();
            let all: Vec<FaceImage> = hr_images.into_iter().chain(lr_images).collect();
            let (embeddings, tapes) = forward_all(&model, &all);
            let mut embeddings = embeddings;
            let lr_emb = embeddings.split_off(b);
            let paired = to_batch(embeddings, labels.clone())
                .and_then(|hr| PairedBatch::new(hr, to_batch(lr_emb, labels)?))
                .map_err(|e| match e {
                    Error::Numeric(m) => diagnostic(model.params(), epoch, step, lr, &m),
                    other => other,
                })?;
            let out = octuplet_loss_grad(&paired, &params)?;
            if !out.total.is_finite() {
                return Err(diagnostic(model.params(), epoch, step, lr, &format!("loss {}", out.total)));
            }
            if out.total > 0.0 {
                let grads: Vec<Vec<f64>> = out.grad_hr.into_iter().chain(out.grad_lr).collect();
                let g = accumulate_grads(&model, &tapes, &grads);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(diagnostic(model.params(), epoch, step, lr, "non-finite gradient"));
                }
                optimizer.step(model.params_mut(), &g, lr);
            }
            epoch_loss += out.total;
            let mut record = StepRecord {
                step,
                epoch,
                total: out.total,
                terms: out.terms,
                learning_rate: lr,
                validation: None,
            };
            if checkpoints.contains(&(bi + 1)) {
                if let Some(v) = &validation {
                    model.set_training(false);
                    let accs = validate_model(&model, v, &config.validation_resolutions)?;
                    model.set_training(true);
                    let mean = accs.iter().map(|a| a.1).sum::<f64>() / accs.len().max(1) as f64;
                    record.validation = Some(mean);
                    history.validations.push(ValidationRecord {
                        step,
                        epoch,
                        accuracies: accs,
                        mean,
                    });
                    if best.as_ref().is_none_or(|b| mean > b.accuracy) {
                        best = Some(BestSnapshot {
                            step,
                            epoch,
                            accuracy: mean,
                            params: model.params().to_vec(),
                        });
                    }
                }
            }
            history.steps.push(record);
        }
        history.epoch_mean_loss.push(epoch_loss / batches.len().max(1) as f64);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    model.set_training(false);
    Ok(FineTuneOutcome { model, history, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    /// Training accuracy of the classification head per epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Trains `model` plus a linear softmax head to classify the pool's
/// identities from full-resolution images, using Adam.
pub fn pretrain_classifier<M: FeatureExtractor>(
    model: &mut M,
    pool: &IdentityPool,
    source: &dyn ImageSource,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("pre-training needs positive epochs, batch size and learning rate".into()));
    }
    if pool.len() < 2 {
        return Err(Error::Config("pre-training needs at least two identities".into()));
    }
    let items: Vec<(String, usize)> = pool
        .identities()
        .iter()
        .enumerate()
        .flat_map(|(label, id)| id.images.iter().map(move |r| (r.clone(), label)))
        .collect();
    let mut head = ClassifierHead::new(model.dim(), pool.len(), derive_seed(config.seed, &[tag::PRETRAIN]));
    let mut opt_model = Optimizer::new(OptimizerKind::adamw(1e-8), model.num_params());
    let mut opt_head = Optimizer::new(OptimizerKind::adamw(1e-8), head.params().len());
    let mut report = PretrainReport::default();
    model.set_training(true);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = rng_for(config.seed, &[tag::PRETRAIN, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let images = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &k)| {
                    let img = source.load(&items[k].0)?;
                    let mut rng = rng_for(config.seed, &[tag::PRETRAIN, tag::AUGMENT, step, i as u64]);
                    Ok(augment(&img, &config.augment, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            let (embeddings, tapes) = forward_all(model, &images);
            let mut grad_head = vec![0.0; head.params().len()];
            let mut grads = Vec::with_capacity(chunk.len());
            let scale = 1.0 / chunk.len() as f64;
            for (e, &k) in embeddings.iter().zip(chunk) {
                let (loss, g, pred) = head.cross_entropy(e, items[k].1, &mut grad_head);
                if !loss.is_finite() {
                    return Err(diagnostic(model.params(), epoch + 1, step as usize, config.learning_rate, "non-finite classification loss"));
                }
                loss_sum += loss;
                correct += usize::from(pred == items[k].1);
                grads.push(g.into_iter().map(|v| v * scale).collect::<Vec<f64>>());
            }
            grad_head.iter_mut().for_each(|v| *v *= scale);
            let g = accumulate_grads(model, &tapes, &grads);
            opt_model.step(model.params_mut(), &g, config.learning_rate);
            opt_head.step(head.params_mut(), &grad_head, config.learning_rate);
        }
        report.epoch_loss.push(loss_sum / items.len() as f64);
        report.epoch_accuracy.push(correct as f64 / items.len() as f64);
    }
    model.set_training(false);
    Ok(report)
}
