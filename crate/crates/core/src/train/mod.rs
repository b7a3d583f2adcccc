//! Experiment orchestration: configuration with environment overrides,
//! the pretraining loop, sealed checkpoint files, downstream protocol
//! runs, and the ablation grid.

pub mod checkpoint;
pub mod config;
pub mod pretrain;
pub mod protocol;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{AblationSwitches, ExperimentConfig, OptimizerConfig, SamplingMode};
pub use pretrain::{
    loss_trend, pretrain, random_params, split_features, MetricsRecord, SplitFeatures,
};
pub use protocol::{
    ablate, default_grid, run_cell, run_protocol, write_ablation_csv, AblationCell, AblationRow,
};
