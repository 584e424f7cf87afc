//! End-to-end orchestration: model assembly, checkpointing, pretraining,
//! finetuning, evaluation, the multi-seed protocol, the (alpha, beta)
//! ablation sweep, and embedding export.

mod checkpoint;
mod evaluate;
mod export;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use evaluate::{
    ablation_sweep, evaluate_split, run_protocol, survival_matrix, MetricSummary, MetricsReport,
    SplitMetrics, SweepRow, DEFAULT_SWEEP_GRID, IBS_POINTS,
};
pub use export::{export_embeddings, write_embeddings_csv, EmbeddingExport, EmbeddingProjection};
pub use model::{HeadKind, ModelNodes, SurvModel};
pub use train::{finetune, pretrain, FinetuneOutput, PretrainOutput};

use thiserror::Error;

use crate::autodiff::{AutodiffError, TensorError};
use crate::config::{ConfigError, Mode};
use crate::data::DataError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::optim::OptimError;
use crate::survival::SurvivalError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pretraining requires mode ssl, essl, or tessl; config has mode {0}")]
    PretrainMode(Mode),
    #[error("the ablation sweep requires mode tessl; config has mode {0}")]
    SweepMode(Mode),
    #[error("dataset has {data} features but the config expects input_dim = {config}")]
    DataDimension { data: usize, config: usize },
    #[error("{split} split has {got} subjects, need at least {need}")]
    SplitTooSmall { split: &'static str, need: usize, got: usize },
    #[error("{overlap} evaluation subjects belong to the recorded training split")]
    Leakage { overlap: usize },
    #[error("this operation needs a {expected} head, the model has a {got} head")]
    WrongHead { expected: &'static str, got: &'static str },
    #[error("checkpoint tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape { name: String, got: (usize, usize), expected: (usize, usize) },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint holds unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("projection to 2 components needs {need} {what}, got {got}")]
    ProjectionTooSmall { what: &'static str, need: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}
