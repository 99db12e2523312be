//! Knowledge-evolution training: train a generation, re-initialize the
//! reset-hypothesis, repeat.

mod evolve;
mod generation;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, Head, NetworkGraph};
use crate::metrics::MetricsError;
use crate::split::{SplitError, Technique};
use crate::tensor::EngineError;

pub use evolve::{
    mask_for_generation, run_knowledge_evolution, GenerationLog, KeOutcome, KeRun, KeState, LayerHypothesis,
    ReinitEvent,
};
pub use generation::{evaluate_model, pk_batches, reinit_reset, train_generation, MetricRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossKind {
    Ce {},
    SmoothCe { alpha: f64 },
    Triplet { margin: f64 },
}

impl LossKind {
    pub fn task(self) -> Task {
        match self {
            LossKind::Triplet { .. } => Task::Retrieval,
            _ => Task::Classification,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Retrieval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// One mask for the whole run.
    #[default]
    Fixed,
    /// A fresh WELS mask before every generation.
    Resample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    /// Fresh draws from each layer's initial distribution.
    #[default]
    Random,
    /// Reset entries set to zero.
    Zeros,
}

/// Training-time input augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Horizontal flip with probability 1/2.
    #[serde(default)]
    pub flip: bool,
    /// Zero-pad by this many pixels, then crop back at a random offset.
    #[serde(default)]
    pub crop_padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub generations: usize,
    pub seed: u64,
    pub technique: Technique,
    pub split_rate: f64,
    pub mask_policy: MaskPolicy,
    pub reset_mode: ResetMode,
    /// Samples per class in triplet batches; `batch_size / samples_per_class` classes per batch.
    pub samples_per_class: usize,
    /// NMI cluster count; defaults to the number of classes.
    pub nmi_clusters: Option<usize>,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.256,
            momentum: 0.9,
            weight_decay: 1e-4,
            loss: LossKind::SmoothCe { alpha: 0.1 },
            generations: 5,
            seed: 0,
            technique: Technique::Kels,
            split_rate: 0.5,
            mask_policy: MaskPolicy::Fixed,
            reset_mode: ResetMode::Random,
            samples_per_class: 5,
            nmi_clusters: None,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.split_rate > 0.0 && self.split_rate < 1.0) {
            return bad(format!("split_rate must lie in (0, 1), got {}", self.split_rate));
        }
        match self.loss {
            LossKind::SmoothCe { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                return bad(format!("label smoothing must lie in (0, 1), got {alpha}"));
            }
            LossKind::Triplet { margin } if !(margin > 0.0 && margin.is_finite()) => {
                return bad(format!("triplet margin must be positive, got {margin}"));
            }
            LossKind::Triplet { .. } if self.samples_per_class < 2 || self.batch_size < 2 * self.samples_per_class => {
                return bad(format!(
                    "triplet batches need samples_per_class >= 2 and at least two classes per batch \
                     (batch_size {}, samples_per_class {})",
                    self.batch_size, self.samples_per_class
                ));
            }
            _ => {}
        }
        if self.mask_policy == MaskPolicy::Resample && self.technique == Technique::Kels {
            return bad("mask_policy = resample is only defined for the WELS technique".into());
        }
        if self.nmi_clusters == Some(0) {
            return bad("nmi_clusters must be at least 1".into());
        }
        Ok(())
    }

    /// Checks that the graph's head suits the loss.
    pub fn check_graph(&self, graph: &NetworkGraph, classes: usize) -> Result<(), TrainError> {
        match (self.loss.task(), graph.head()) {
            (Task::Classification, Head::Classifier) if graph.output_width() != classes => {
                Err(TrainError::Config(format!(
                    "classifier emits {} logits but the dataset has {classes} classes",
                    graph.output_width()
                )))
            }
            (Task::Classification, Head::Classifier) | (Task::Retrieval, Head::Embedding) => Ok(()),
            (task, head) => Err(TrainError::Config(format!(
                "{task:?} needs a different head than {head:?}"
            ))),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite loss at generation {generation}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        generation: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite gradient for `{layer}` at generation {generation}, epoch {epoch}, batch {batch}")]
    NonFiniteGradient {
        generation: usize,
        epoch: usize,
        batch: usize,
        layer: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
