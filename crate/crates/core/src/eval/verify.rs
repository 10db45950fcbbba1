//! Cross- and same-resolution verification over a pair protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coremath::cosine_distance;
use crate::degrade::{degrade_image, validate_resolution, FACE_SIZE};
use crate::error::{Error, Result};
use crate::eval::metrics::{equal_error_rate, kfold_accuracy, roc_curve, tar_at_far};
use crate::eval::protocol::PairProtocol;
use crate::io::ImageSource;
use crate::training::nn::FeatureExtractor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Which side(s) of a pair are degraded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Only the second image is degraded.
    Cross,
    /// Both images are degraded.
    Same,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cross" => Ok(EvalMode::Cross),
            "same" => Ok(EvalMode::Same),
            other => Err(Error::Config(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Cross => "cross",
            EvalMode::Same => "same",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
}

/// Metrics for one resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub resolution: u32,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub eer: f64,
    pub tar_at_far: Vec<TarAtFar>,
    /// `(far, tar)` along the threshold sweep.
    pub roc: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub ref1: String,
    pub ref2: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub mode: EvalMode,
    pub metric: String,
    pub folds: usize,
    pub pairs: usize,
    pub genuine_pairs: usize,
    pub skipped: Vec<SkippedPair>,
    pub results: Vec<ResolutionResult>,
    pub config: serde_json::Value,
}

impl VerificationReport {
    pub fn result(&self, resolution: u32) -> Option<&ResolutionResult> {
        self.results.iter().find(|r| r.resolution == resolution)
    }

    pub fn accuracy(&self, resolution: u32) -> Option<f64> {
        self.result(resolution).map(|r| r.accuracy)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    /// One row per resolution.
    pub fn to_csv(&self) -> String {
        let fars: Vec<f64> = self
            .results
            .first()
            .map(|r| r.tar_at_far.iter().map(|t| t.far).collect())
            .unwrap_or_default();
        let mut out = String::from("mode,resolution,accuracy,accuracy_std,eer");
        for f in &fars {
            out.push_str(&format!(",tar_at_far_{f}"));
        }
        out.push('\n');
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{}",
                self.mode, r.resolution, r.accuracy, r.accuracy_std, r.eer
            ));
            for t in &r.tar_at_far {
                out.push_str(&format!(",{}", t.tar));
            }
            out.push('\n');
        }
        out
    }

    pub fn roc_csv(&self, resolution: u32) -> Option<String> {
        let r = self.result(resolution)?;
        let mut out = String::from("far,tar\n");
        for [far, tar] in &r.roc {
            out.push_str(&format!("{far},{tar}\n"));
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub far_targets: Vec<f64>,
    /// Drop pairs whose images fail to load instead of failing the run.
    pub skip_unreadable: bool,
    /// Echoed verbatim into the report.
    pub config: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            far_targets: vec![1e-3, 1e-2, 1e-1],
            skip_unreadable: false,
            config: serde_json::Value::Null,
        }
    }
}

/// Embeddings keyed by `(image reference, resolution)`.
pub type EmbeddingCache = BTreeMap<(String, u32), Vec<f64>>;

/// Embeds every requested `(reference, resolution)` once. Each image is
/// loaded a single time and degraded to all resolutions it is needed at.
/// Load failures are returned instead of raised.
pub fn embed_references<M: FeatureExtractor>(
    model: &M,
    source: &dyn ImageSource,
    requests: &BTreeMap<String, BTreeSet<u32>>,
) -> Result<(EmbeddingCache, BTreeMap<String, String>)> {
    let jobs: Vec<(&String, &BTreeSet<u32>)> = requests.iter().collect();
    let results: Vec<(String, Result<Vec<(u32, Vec<f64>)>>)> = jobs
        .par_iter()
        .map(|(reference, resolutions)| {
            let out = source.load(reference).and_then(|img| {
                resolutions
                    .iter()
                    .map(|&r| Ok((r, model.embed(&degrade_image(&img, r)?))))
                    .collect::<Result<Vec<_>>>()
            });
            ((*reference).clone(), out)
        })
        .collect();
    let mut cache = EmbeddingCache::new();
    let mut failures = BTreeMap::new();
    for (reference, out) in results {
        match out {
            Ok(list) => {
                for (r, e) in list {
                    cache.insert((reference.clone(), r), e);
                }
            }
            Err(e @ (Error::Image { .. } | Error::Io { .. })) => {
                failures.insert(reference, e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok((cache, failures))
}

/// Accuracy, EER and TAR@FAR for one set of pair distances.
pub fn summarize(
    resolution: u32,
    distances: &[f64],
    genuine: &[bool],
    folds: &[usize],
    far_targets: &[f64],
) -> Result<ResolutionResult> {
    let (accuracy, accuracy_std) = kfold_accuracy(distances, genuine, folds)?;
    let roc = roc_curve(distances, genuine)?;
    Ok(ResolutionResult {
        resolution,
        accuracy,
        accuracy_std,
        eer: equal_error_rate(&roc),
        tar_at_far: far_targets
            .iter()
            .map(|&far| TarAtFar {
                far,
                tar: tar_at_far(&roc, far),
            })
            .collect(),
        roc: roc.iter().map(|p| [p.far, p.tar]).collect(),
    })
}

/// Cosine-distance verification at each resolution. In cross mode only the
/// second image of every pair is degraded; in same mode both are. The model
/// is used for inference only.
pub fn evaluate<M: FeatureExtractor>(
    model: &M,
    protocol: &PairProtocol,
    source: &dyn ImageSource,
    resolutions: &[u32],
    mode: EvalMode,
    options: &EvalOptions,
) -> Result<VerificationReport> {
    if resolutions.is_empty() {
        return Err(Error::Config("no evaluation resolutions given".into()));
    }
    for &r in resolutions {
        validate_resolution(r)?;
    }
    for &f in &options.far_targets {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("FAR target {f} outside [0, 1]")));
        }
    }
    let full = FACE_SIZE as u32;
    let mut requests: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for p in protocol.pairs() {
        for &r in resolutions {
            let first = if mode == EvalMode::Same { r } else { full };
            requests.entry(p.ref1.clone()).or_default().insert(first);
            requests.entry(p.ref2.clone()).or_default().insert(r);
        }
    }
    let (cache, failures) = embed_references(model, source, &requests)?;
    if !failures.is_empty() && !options.skip_unreadable {
        let listing: Vec<String> = failures.iter().take(20).map(|(r, e)| format!("  {r}: {e}")).collect();
        return Err(Error::Image {
            path: failures.keys().next().expect("nonempty").into(),
            message: format!("{} images failed to load:\n{}", failures.len(), listing.join("\n")),
        });
    }
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for p in protocol.pairs() {
        match failures.get(&p.ref1).or_else(|| failures.get(&p.ref2)) {
            Some(reason) => skipped.push(SkippedPair {
                ref1: p.ref1.clone(),
                ref2: p.ref2.clone(),
                reason: reason.clone(),
            }),
            None => kept.push(p),
        }
    }
    let genuine: Vec<bool> = kept.iter().map(|p| p.genuine).collect();
    let folds: Vec<usize> = kept.iter().map(|p| p.fold).collect();
    let mut results = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let first = if mode == EvalMode::Same { r } else { full };
        let distances = kept
            .iter()
            .map(|p| {
                let a = &cache[&(p.ref1.clone(), first)];
                let b = &cache[&(p.ref2.clone(), r)];
                cosine_distance(a, b)
            })
            .collect::<Result<Vec<f64>>>()?;
        results.push(summarize(r, &distances, &genuine, &folds, &options.far_targets)?);
    }
    Ok(VerificationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        metric: "cosine".into(),
        folds: protocol.folds(),
        pairs: kept.len(),
        genuine_pairs: genuine.iter().filter(|&&g| g).count(),
        skipped,
        results,
        config: options.config.clone(),
    })
}

pub fn evaluate_cross_resolution<M: FeatureExtractor>(
    model: &M,
    protocol: &PairProtocol,
    source: &dyn ImageSource,
    resolutions: &[u32],
    options: &EvalOptions,
) -> Result<VerificationReport> {
    evaluate(model, protocol, source, resolutions, EvalMode::Cross, options)
}

pub fn evaluate_same_resolution<M: FeatureExtractor>(
    model: &M,
    protocol: &PairProtocol,
    source: &dyn ImageSource,
    resolutions: &[u32],
    options: &EvalOptions,
) -> Result<VerificationReport> {
    evaluate(model, protocol, source, resolutions, EvalMode::Same, options)
}
