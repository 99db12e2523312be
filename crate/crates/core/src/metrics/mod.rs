//! Losses, evaluation metrics and hypothesis diagnostics.

mod analysis;
mod cluster;
mod loss;
mod retrieval;

use thiserror::Error;

pub use analysis::{h2d_metrics, hypothesis_mean_abs, HypothesisStat};
pub use cluster::{kmeans, nmi_from_assignments, nmi_score, KMeansOptions};
pub use loss::{cross_entropy, l2_normalize, l2_normalize_backward, top1_accuracy};
pub use retrieval::{euclidean, mine_semi_hard, recall_at_k, triplet_loss, Triplet, TripletSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Row view of a rank-2 tensor.
pub(crate) fn rows<T: crate::tensor::Scalar>(
    t: &crate::tensor::Tensor<T>,
    what: &'static str,
) -> Result<(usize, usize), MetricsError> {
    if t.rank() != 2 {
        return Err(MetricsError::Dimension {
            what,
            expected: 2,
            actual: t.rank(),
        });
    }
    Ok((t.dim(0), t.dim(1)))
}

pub(crate) fn check_labels(labels: &[usize], n: usize) -> Result<(), MetricsError> {
    if labels.len() != n {
        return Err(MetricsError::Dimension {
            what: "label count",
            expected: n,
            actual: labels.len(),
        });
    }
    Ok(())
}
