//! Fine-tune + evaluate cycles and comparison grids.
//!
//! [`run_grid`] works with any extractor, image source and protocol. The
//! desk-scale helpers ([`DeskExperiment`]) build a synthetic world, pre-train
//! the toy backbone on it and evaluate before and after octuplet fine-tuning.

use serde::{Deserialize, Serialize};

use crate::batching::IdentityPool;
use crate::coremath::DistanceMetric;
use crate::error::Result;
use crate::eval::protocol::{generate_pairs, PairProtocol};
use crate::eval::verify::{evaluate_cross_resolution, EvalOptions, VerificationReport};
use crate::io::ImageSource;
use crate::octuplet::TermMask;
use crate::seeds::{derive_seed, tag};
use crate::synth::{generate, SynthConfig, SynthDataset};
use crate::training::nn::{BackboneConfig, FeatureExtractor, ToyBackbone};
use crate::training::{fine_tune, pretrain_classifier, FineTuneConfig, PretrainConfig, PretrainReport, TrainingHistory};

/// One fine-tune + evaluate cycle.
pub struct CellOutcome<M> {
    pub label: String,
    pub config: FineTuneConfig,
    pub model: M,
    pub history: TrainingHistory,
    pub report: VerificationReport,
}

/// Comparison of one cell against the shared starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub term_mask: TermMask,
    pub margin: f64,
    pub batch_size: usize,
    pub metric: String,
    pub normalize: bool,
    /// `(resolution, accuracy before, accuracy after)`.
    pub accuracies: Vec<(u32, f64, f64)>,
}

impl GridRow {
    pub fn gain(&self, resolution: u32) -> Option<f64> {
        self.accuracies
            .iter()
            .find(|a| a.0 == resolution)
            .map(|a| a.2 - a.1)
    }
}

fn row_from(label: &str, cfg: &FineTuneConfig, before: &VerificationReport, after: &VerificationReport) -> GridRow {
    GridRow {
        label: label.to_string(),
        term_mask: cfg.term_mask,
        margin: cfg.margin,
        batch_size: cfg.batch_size,
        metric: cfg.metric.to_string(),
        normalize: cfg.normalize,
        accuracies: after
            .results
            .iter()
            .map(|r| (r.resolution, before.accuracy(r.resolution).unwrap_or(f64::NAN), r.accuracy))
            .collect(),
    }
}

/// Comparison table as CSV, one row per cell with before/after accuracy and
/// gain per resolution.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let resolutions: Vec<u32> = rows.first().map(|r| r.accuracies.iter().map(|a| a.0).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["label", "hh", "hl", "lh", "ll", "margin", "batch_size", "metric", "normalize"]
        .map(String::from)
        .to_vec();
    for r in &resolutions {
        header.extend([format!("acc{r}_before"), format!("acc{r}_after"), format!("gain{r}")]);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for row in rows {
        let mut rec = vec![row.label.clone()];
        rec.extend(row.term_mask.flags().map(|f| u8::from(f).to_string()));
        rec.extend([
            row.margin.to_string(),
            row.batch_size.to_string(),
            row.metric.clone(),
            row.normalize.to_string(),
        ]);
        for (_, b, a) in &row.accuracies {
            rec.extend([b.to_string(), a.to_string(), (a - b).to_string()]);
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Comparison table as Markdown with accuracies in percent.
pub fn grid_markdown(rows: &[GridRow]) -> String {
    let resolutions: Vec<u32> = rows.first().map(|r| r.accuracies.iter().map(|a| a.0).collect()).unwrap_or_default();
    let mut out = String::from("| cell | T_h | T_hl | T_lh | T_l |");
    for r in &resolutions {
        out.push_str(&format!(" {r} px | gain {r} px |"));
    }
    out.push_str("\n|---|---|---|---|---|");
    for _ in &resolutions {
        out.push_str("---|---|");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("| {} |", row.label));
        for f in row.term_mask.flags() {
            out.push_str(if f { " x |" } else { "   |" });
        }
        for (_, b, a) in &row.accuracies {
            out.push_str(&format!(" {:.2} | {:+.2} |", 100.0 * a, 100.0 * (a - b)));
        }
        out.push('\n');
    }
    out
}

/// Training identities plus the verification benchmark used to score them.
#[derive(Clone, Copy)]
pub struct GridData<'a> {
    pub pool: &'a IdentityPool,
    pub train_source: &'a dyn ImageSource,
    pub protocol: &'a PairProtocol,
    pub eval_source: &'a dyn ImageSource,
    pub resolutions: &'a [u32],
}

/// Result of a grid: the starting point's report, one row per cell and the
/// fine-tuned models.
pub struct GridOutcome<M> {
    pub baseline: VerificationReport,
    pub rows: Vec<GridRow>,
    pub cells: Vec<CellOutcome<M>>,
}

/// Fine-tunes a copy of `model` for every cell and evaluates each result
/// against the same benchmark.
pub fn run_grid<M: FeatureExtractor + Clone>(
    model: &M,
    data: GridData<'_>,
    cells: &[(String, FineTuneConfig)],
) -> Result<GridOutcome<M>> {
    let baseline = evaluate_cross_resolution(model, data.protocol, data.eval_source, data.resolutions, &EvalOptions::default())?;
    let mut rows = Vec::with_capacity(cells.len());
    let mut outcomes = Vec::with_capacity(cells.len());
    for (label, cfg) in cells {
        let out = run_cell(model, data, label, cfg)?;
        rows.push(row_from(label, cfg, &baseline, &out.report));
        outcomes.push(out);
    }
    Ok(GridOutcome {
        baseline,
        rows,
        cells: outcomes,
    })
}

pub fn run_cell<M: FeatureExtractor + Clone>(
    model: &M,
    data: GridData<'_>,
    label: &str,
    config: &FineTuneConfig,
) -> Result<CellOutcome<M>> {
    let tuned = fine_tune(model.clone(), data.pool, data.train_source, None, config)?;
    let opts = EvalOptions {
        config: config.to_json(),
        ..EvalOptions::default()
    };
    let report = evaluate_cross_resolution(&tuned.model, data.protocol, data.eval_source, data.resolutions, &opts)?;
    Ok(CellOutcome {
        label: label.to_string(),
        config: config.clone(),
        model: tuned.model,
        history: tuned.history,
        report,
    })
}

/// The term-mask ablation: every partial mask in table order, then the full
/// mask as the reference row.
pub fn term_mask_cells(base: &FineTuneConfig) -> Vec<(String, FineTuneConfig)> {
    TermMask::ablation_rows()
        .into_iter()
        .chain([TermMask::ALL])
        .map(|mask| {
            let mut cfg = base.clone();
            cfg.term_mask = mask;
            (mask.to_string(), cfg)
        })
        .collect()
}

/// Distance metric and normalization combinations: euclidean, euclidean with
/// normalization, squared euclidean with and without normalization, and
/// cosine with normalization.
pub fn metric_cells(base: &FineTuneConfig) -> Vec<(String, FineTuneConfig)> {
    [
        (DistanceMetric::Euclidean, false),
        (DistanceMetric::Euclidean, true),
        (DistanceMetric::SquaredEuclidean, true),
        (DistanceMetric::SquaredEuclidean, false),
        (DistanceMetric::Cosine, true),
    ]
    .into_iter()
    .map(|(metric, normalize)| {
        let mut cfg = base.clone();
        cfg.metric = metric;
        cfg.normalize = normalize;
        let label = if normalize { format!("{metric}+norm") } else { metric.to_string() };
        (label, cfg)
    })
    .collect()
}

/// Every margin crossed with every batch size.
pub fn margin_batch_cells(base: &FineTuneConfig, margins: &[f64], batch_sizes: &[usize]) -> Vec<(String, FineTuneConfig)> {
    batch_sizes
        .iter()
        .flat_map(|&b| {
            margins.iter().map(move |&m| {
                let mut cfg = base.clone();
                cfg.margin = m;
                cfg.batch_size = b;
                (format!("m={m},B={b}"), cfg)
            })
        })
        .collect()
}

/// Settings of the synthetic desk-scale experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub seed: u64,
    pub train: SynthConfig,
    pub eval: SynthConfig,
    pub genuine_pairs: usize,
    pub imposter_pairs: usize,
    pub folds: usize,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    pub resolutions: Vec<u32>,
}

impl DeskConfig {
    /// Default octuplet loss settings (margin 25, euclidean, no
    /// normalization) with AdaGrad at lr 0.005 for two epochs of B = 32.
    pub fn new(seed: u64) -> Self {
        let mut finetune = FineTuneConfig::default();
        finetune.epochs = 2;
        finetune.batch_size = 32;
        finetune.learning_rate = 5e-3;
        finetune.lr_decay_epochs.clear();
        finetune.seed = derive_seed(seed, &[tag::SAMPLER]);
        finetune.validations_per_epoch = 0;
        Self {
            seed,
            train: SynthConfig {
                identities: 96,
                images_per_identity: 12,
                seed: derive_seed(seed, &[tag::SYNTH, 0]),
                ..SynthConfig::default()
            },
            eval: SynthConfig {
                identities: 80,
                images_per_identity: 6,
                seed: derive_seed(seed, &[tag::SYNTH, 1]),
                ..SynthConfig::default()
            },
            genuine_pairs: 1000,
            imposter_pairs: 1000,
            folds: 10,
            backbone: BackboneConfig::desk(64),
            pretrain: PretrainConfig {
                epochs: 16,
                batch_size: 32,
                learning_rate: 3e-3,
                seed: derive_seed(seed, &[tag::PRETRAIN]),
                ..PretrainConfig::default()
            },
            finetune,
            resolutions: vec![7, 112],
        }
    }
}

/// A pre-trained backbone with its synthetic train and evaluation worlds.
pub struct DeskExperiment {
    pub config: DeskConfig,
    pub train: SynthDataset,
    pub eval: SynthDataset,
    pub protocol: PairProtocol,
    pub pretrained: ToyBackbone,
    pub pretrain_report: PretrainReport,
}

impl DeskExperiment {
    pub fn prepare(config: DeskConfig) -> Result<Self> {
        let train = generate(&config.train, "t")?;
        let eval = generate(&config.eval, "e")?;
        let protocol = generate_pairs(
            &eval.pool,
            config.genuine_pairs,
            config.imposter_pairs,
            config.folds,
            derive_seed(config.seed, &[tag::PAIRS]),
        )?;
        let mut net = ToyBackbone::new(config.backbone.clone(), derive_seed(config.seed, &[tag::INIT]))?;
        let pretrain_report = pretrain_classifier(&mut net, &train.pool, &train.source, &config.pretrain)?;
        Ok(Self {
            config,
            train,
            eval,
            protocol,
            pretrained: net,
            pretrain_report,
        })
    }

    pub fn data(&self) -> GridData<'_> {
        GridData {
            pool: &self.train.pool,
            train_source: &self.train.source,
            protocol: &self.protocol,
            eval_source: &self.eval.source,
            resolutions: &self.config.resolutions,
        }
    }

    pub fn run(&self, cells: &[(String, FineTuneConfig)]) -> Result<GridOutcome<ToyBackbone>> {
        run_grid(&self.pretrained, self.data(), cells)
    }

    /// The configured fine-tuning settings as a single cell.
    pub fn default_cell(&self) -> Result<CellOutcome<ToyBackbone>> {
        run_cell(&self.pretrained, self.data(), "full", &self.config.finetune)
    }

    /// Evaluation against the held-out identities' images.
    pub fn evaluate<M: FeatureExtractor>(&self, model: &M) -> Result<VerificationReport> {
        evaluate_cross_resolution(model, &self.protocol, &self.eval.source, &self.config.resolutions, &EvalOptions::default())
    }
}
