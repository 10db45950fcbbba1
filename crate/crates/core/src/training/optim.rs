//! First-order optimizers and the fine-tuning presets.
//!
//! None of the presets applies weight decay, momentum or gradient clipping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    /// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`
    Adagrad { eps: f64 },
    /// Adam with decoupled weight decay.
    Adamw {
        eps: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw(eps: f64) -> Self {
        OptimizerKind::Adamw {
            eps,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adagrad { .. } => (Vec::new(), vec![0.0; n_params]),
            OptimizerKind::Adamw { .. } => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Self {
            kind,
            first,
            second,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adagrad { eps } => {
                for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    *acc += g * g;
                    *p -= lr * g / (acc.sqrt() + eps);
                }
            }
            OptimizerKind::Adamw {
                eps,
                beta1,
                beta2,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *p -= lr * weight_decay * *p;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Named optimizer/schedule bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// AdaGrad (eps 1.0), lr 0.01, 6 epochs, lr / 10 after epochs 2, 4 and 5.
    AdagradDefault,
    /// Plain SGD, lr 0.001, 1 epoch.
    SgdMagface,
    /// AdamW (eps 1e-8), lr 0.0005, 1 epoch.
    AdamwTransformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetValues {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
}

impl Preset {
    pub fn values(self) -> PresetValues {
        match self {
            Preset::AdagradDefault => PresetValues {
                optimizer: OptimizerKind::Adagrad { eps: 1.0 },
                learning_rate: 0.01,
                epochs: 6,
                lr_decay_epochs: vec![2, 4, 5],
            },
            Preset::SgdMagface => PresetValues {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.001,
                epochs: 1,
                lr_decay_epochs: Vec::new(),
            },
            Preset::AdamwTransformer => PresetValues {
                optimizer: OptimizerKind::adamw(1e-8),
                learning_rate: 0.0005,
                epochs: 1,
                lr_decay_epochs: Vec::new(),
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::AdagradDefault => "adagrad-default",
            Preset::SgdMagface => "sgd-magface",
            Preset::AdamwTransformer => "adamw-transformer",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adagrad-default" => Ok(Preset::AdagradDefault),
            "sgd-magface" => Ok(Preset::SgdMagface),
            "adamw-transformer" => Ok(Preset::AdamwTransformer),
            other => Err(Error::Config(format!("unknown optimizer preset '{other}'"))),
        }
    }
}

/// Learning rate for a 1-based epoch: the base rate divided by 10 once for
/// every decay epoch that has already completed.
pub fn learning_rate_at(base: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let k = decay_epochs.iter().filter(|&&e| e < epoch).count();
    base / 10f64.powi(k as i32)
}
