use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "octuplet", version, about = "Octuplet loss fine-tuning and cross-resolution face verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fine-tune a backbone with the octuplet loss.
    Finetune(FinetuneArgs),
    /// Cross- or same-resolution verification of a checkpoint on pair protocols.
    Evaluate(EvaluateArgs),
    /// Run a grid of fine-tune + evaluate cycles and tabulate the results.
    Ablate(AblateArgs),
    /// Generate a balanced pair protocol from an identity dataset.
    Pairs(PairsArgs),
    /// Write degraded copies of every image in a directory tree.
    Degrade(DegradeArgs),
    /// Render accuracy and ROC plots from report JSON files.
    Report(ReportArgs),
    /// Render a synthetic face-style identity dataset.
    Synth(SynthArgs),
    /// Pre-train the toy backbone as an identity classifier.
    Pretrain(PretrainArgs),
}

/// Fine-tuning settings. Each flag mirrors the configuration key of the same
/// name (dashes become underscores) and overrides the `--config` file.
#[derive(Args, Default)]
pub struct TrainFlags {
    /// Flat key = value file with configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// adagrad-default, sgd-magface or adamw-transformer.
    #[arg(long, allow_hyphen_values = true)]
    pub preset: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub learning_rate: Option<String>,
    /// Comma-separated 1-based epochs after which the learning rate drops by 10x.
    #[arg(long, allow_hyphen_values = true)]
    pub lr_decay_epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub batch_size: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub margin: Option<String>,
    /// cosine, euclidean or squared-euclidean.
    #[arg(long, allow_hyphen_values = true)]
    pub metric: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub normalize: Option<String>,
    /// Comma-separated subset of hh,hl,lh,ll.
    #[arg(long, allow_hyphen_values = true)]
    pub term_mask: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub term_hh: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub term_hl: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub term_lh: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub term_ll: Option<String>,
    /// partner or counterpart.
    #[arg(long, allow_hyphen_values = true)]
    pub cross_positive: Option<String>,
    /// Resolutions the degraded half of each batch is drawn from.
    #[arg(long, allow_hyphen_values = true)]
    pub resolutions: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub flip_prob: Option<String>,
    /// Brightness factor range as low,high.
    #[arg(long, allow_hyphen_values = true)]
    pub brightness: Option<String>,
    /// Saturation factor range as low,high.
    #[arg(long, allow_hyphen_values = true)]
    pub saturation: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub validations_per_epoch: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub validation_resolutions: Option<String>,
}

impl TrainFlags {
    /// Flags that were given on the command line, keyed like the config file.
    pub fn overrides(&self) -> BTreeMap<String, String> {
        let fields = [
            ("preset", &self.preset),
            ("learning_rate", &self.learning_rate),
            ("lr_decay_epochs", &self.lr_decay_epochs),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("margin", &self.margin),
            ("metric", &self.metric),
            ("normalize", &self.normalize),
            ("term_mask", &self.term_mask),
            ("term_hh", &self.term_hh),
            ("term_hl", &self.term_hl),
            ("term_lh", &self.term_lh),
            ("term_ll", &self.term_ll),
            ("cross_positive", &self.cross_positive),
            ("resolutions", &self.resolutions),
            ("seed", &self.seed),
            ("flip_prob", &self.flip_prob),
            ("brightness", &self.brightness),
            ("saturation", &self.saturation),
            ("validations_per_epoch", &self.validations_per_epoch),
            ("validation_resolutions", &self.validation_resolutions),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

/// Where the starting weights come from.
#[derive(Args)]
pub struct ModelFlags {
    /// Checkpoint written by `pretrain` or `finetune`.
    #[arg(long, conflicts_with = "toy_backbone", required_unless_present = "toy_backbone")]
    pub checkpoint: Option<PathBuf>,
    /// Start from a freshly initialised toy backbone.
    #[arg(long)]
    pub toy_backbone: bool,
    /// Embedding dimension of a fresh toy backbone.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
}

/// Training identities: `root/<identity>/<image>` or a manifest.
#[derive(Args)]
pub struct DataFlags {
    /// Dataset root; images are referenced relative to it.
    #[arg(long)]
    pub data: PathBuf,
    /// Tab-separated `identity<TAB>relative/path` listing instead of scanning the root.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Pair protocol used for periodic validation.
    #[arg(long)]
    pub val_protocol: Option<PathBuf>,
    /// Image root of the validation protocol (defaults to --data).
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ProtocolFormat {
    /// `ref1<TAB>ref2<TAB>genuine<TAB>fold` with a header row.
    Native,
    /// LFW-style `pairs.txt`.
    Lfw,
}

#[derive(Args)]
pub struct ProtocolFlags {
    /// Pair protocol file; repeat for several protocols.
    #[arg(long = "protocol", required = true)]
    pub protocols: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "native")]
    pub protocol_format: ProtocolFormat,
    /// Image extension for LFW-style protocols.
    #[arg(long, default_value = "jpg")]
    pub lfw_ext: String,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolFlags,
    /// Image root the protocol references are relative to.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "7,14,28,56,112")]
    pub resolutions: Vec<u32>,
    /// cross degrades the second image only, same degrades both.
    #[arg(long, default_value = "cross")]
    pub mode: String,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1")]
    pub far: Vec<f64>,
    /// Drop pairs with unreadable images instead of failing.
    #[arg(long)]
    pub skip_unreadable: bool,
    /// Also write one ROC CSV per resolution.
    #[arg(long)]
    pub roc: bool,
    /// Also render SVG plots from the written reports.
    #[arg(long)]
    pub plots: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Grid {
    /// The twelve partial term masks plus the full mask.
    Terms,
    /// Distance metric and normalization combinations.
    Metrics,
    /// Every margin crossed with every batch size.
    Margins,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum, default_value = "terms")]
    pub grid: Grid,
    #[arg(long, value_delimiter = ',', default_value = "1,5,25,100,500")]
    pub margins: Vec<f64>,
    /// Batch sizes for the margin grid (defaults to the configured batch size).
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
    /// Evaluation pair protocol (native format).
    #[arg(long)]
    pub protocol: PathBuf,
    /// Image root of the evaluation protocol (defaults to --data).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "7,112")]
    pub eval_resolutions: Vec<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PairsArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, default_value_t = 3000)]
    pub genuine: usize,
    #[arg(long, default_value_t = 3000)]
    pub imposter: usize,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target resolution, or a list to draw from per image.
    #[arg(long = "r", value_delimiter = ',', required = true)]
    pub resolutions: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output format; only lossless png is supported.
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Report JSON written by `evaluate`; repeat to overlay several.
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    /// Legend label per report (defaults to the file stem).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub identities: usize,
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}
