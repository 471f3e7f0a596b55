//! Heterogeneous graph transformer and the multi-label next-strategy
//! classifier built on it.

mod calibrate;
mod metrics;
mod model;
mod train;

pub use calibrate::{calibrate_thresholds, threshold_grid, ThresholdSet};
pub use metrics::{evaluate_classifier, macro_f1, ClassificationReport, Confusion, LabelMetrics};
pub use model::{AttentionRecord, HgtConfig, HgtModel, NodeStates, CHECKPOINT_KIND};
pub use train::{build_points, positive_weights, predict_points, train_classifier, LabeledPoint, TrainConfig, TrainReport};

use crate::numerics::NumericsError;
use crate::session_graph::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum HgtError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("meta-relation {0} is not registered in this model")]
    UnregisteredRelation(String),
    #[error("node {0} is not a help-seeker utterance")]
    NotSeeker(usize),
    #[error("strategy {0} has no positive training example")]
    MissingStrategy(String),
    #[error("{0}")]
    Invalid(String),
}
