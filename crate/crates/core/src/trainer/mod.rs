//! Desk-scale MLP trainer: ReLU networks, Adam, dropout and cubic magnitude pruning.

mod adam;
mod data;
mod model;
mod prune;
mod train;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use data::{
    gen_linear_dataset, gen_polynomial_dataset, gen_prototype_dataset, gen_random_dataset,
    polynomial_has_term, polynomial_labels, Dataset, POLYNOMIAL_OUTPUTS,
};
pub use model::{
    dropout_masks, he_init, ForwardPass, Gradients, Head, LossKind, MlpModel, Targets,
};
pub use prune::{apply_pruning, sparsity_at, PruneSchedule};
pub use train::{accuracy, train, write_metrics_jsonl, EpochMetrics, TrainConfig, TrainOutcome};

use crate::archive::ArchiveError;
use crate::graph::GraphError;
use crate::init::InitError;
use crate::regularizer::RegularizerError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
