//! Desk-scale training harness.
//!
//! A frozen [`MockBackbone`] stands in for the foundation model, toy street
//! scenes stand in for the knowledge and application sets, and a linear
//! per-patch head replaces the segmentation decoder. Only the adapter blocks
//! and the head train.

mod backbone;
mod metrics;
mod model;
mod optim;
mod scene;
pub mod street;
mod train;

pub use backbone::{BackboneVars, MockBackbone};
pub use metrics::{segmentation_metrics, ClassIou, Confusion, MetricsReport};
pub use model::{Model, ModelConfig, ModelVars, Variant};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use scene::{SceneConfig, Style, ToyScene, ToyWorld, TOY_ONTOLOGY};
pub use train::{
    ablate, evaluate, train, AblationAxis, AblationRow, Dataset, EvalPoint, Fixture, PromptStat, PromptSummary,
    Sample, TaskConfig, TrainConfig, TrainOutcome, TrainReport,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::dcp::DcpError;
use crate::embedding::EmbeddingError;
use crate::pff::PffError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dcp(#[from] DcpError),
    #[error(transparent)]
    Pff(#[from] PffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite loss at step {step}; last good parameters: {}", checkpoint.as_ref().map_or("not written".into(), |p| p.display().to_string()))]
    NonFinite { step: usize, checkpoint: Option<PathBuf> },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;
