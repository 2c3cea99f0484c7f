//! Training, checkpoints, run configuration, and the staged procedure.

pub mod checkpoint;
pub mod config;
pub mod procedure;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ArchSource, DatasetSpec, PruneStage, RunConfig};
pub use procedure::{
    ablate, emit_report, prepare_model, prune_procedure, run_procedure, train_procedure, RunData, RunReport, StageArtifacts,
    StageRow,
};
pub use train::{evaluate, predict, recompute_bn_stats, train_stage, AugmentConfig, EpochStats, OptimizerConfig, TrainConfig};
