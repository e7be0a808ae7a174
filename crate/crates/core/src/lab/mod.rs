//! Toy byte-level language model for the two-phase routing experiments:
//! a shared base model is pretrained with routing bypassed, then routing is
//! trained with the base frozen, then everything is fine-tuned, under
//! Sinkhorn or softmax normalisation.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{CorpusConfig, LabConfig, Normalization, ToyModelConfig, TrainConfig};
pub use model::{Param, RoutingMode, ToyModel};
pub use optim::Adam;
pub use train::{
    balance_loss, balance_loss_graph, collapse_experiment, kmeans, pathways, prepare_data, pretrain, train_phase,
    train_pipeline, write_metrics_csv, BalanceWeights, ExperimentReport, MetricPoint, Pathways, Phase, PhaseSummary,
    RunReport, TrainData, TrainOutcome, TrainState, REPORT_FORMAT_VERSION,
};
