//! Octuplet loss for resolution-robust face embeddings.
//!
//! The loss combines four batch-hard triplet losses over a batch of
//! high-resolution images and their degraded copies: high/high,
//! high/low, low/high and low/low. The crate also carries the pieces needed
//! to use it end to end: an identity-aware batch sampler, the degradation
//! pipeline, a small CPU backbone with a hand-written backward pass, the
//! fine-tuning loop and a cross-resolution verification harness.

pub mod batching;
pub mod coremath;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod mining;
pub mod octuplet;
pub mod seeds;
pub mod synth;
pub mod training;
pub mod triplet;

pub use batching::{build_epoch_batches, Batch, BatchItem, Identity, IdentityPool};
pub use coremath::{distance, pairwise_distances, DistanceMatrix, DistanceMetric, Embedding};
pub use degrade::{degrade_batch, degrade_image, FaceImage, ResolutionSampler, FACE_SIZE};
pub use error::{Error, ErrorKind, Result};
pub use eval::metrics::{equal_error_rate, kfold_accuracy, roc_curve, tar_at_far, RocPoint};
pub use eval::protocol::{generate_pairs, PairProtocol, PairRecord};
pub use eval::verify::{
    evaluate, evaluate_cross_resolution, evaluate_same_resolution, EvalMode, EvalOptions, ResolutionResult,
    VerificationReport,
};
pub use io::{Checkpoint, DirectorySource, ImageSource, MemorySource};
pub use mining::{hardest_negative, mine_triplet_set};
pub use octuplet::{
    build_octuplet_sets, octuplet_loss, octuplet_loss_grad, CrossPositive, OctupletOutput, OctupletParams,
    OctupletSets, PairedBatch, TermMask,
};
pub use training::nn::{BackboneConfig, FeatureExtractor, ToyBackbone};
pub use training::optim::{learning_rate_at, Optimizer, OptimizerKind, Preset};
pub use training::{fine_tune, pretrain_classifier, FineTuneConfig, PretrainConfig, TrainingHistory};
pub use triplet::{enumerate_triplets, triplet_loss, triplet_loss_grad, LabeledBatch, Margin, Triplet};
