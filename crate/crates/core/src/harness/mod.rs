//! Online training loop, evaluation and experiment orchestration.

mod checkpoint;
mod config;
mod records;
mod report;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};
pub use config::{
    resolve_key, AttackSettings, BenchmarkConfig, DataSource, ExperimentConfig, ModelInit,
    PretrainSpec, SamConfig, TrainConfig, CONFIG_KEYS,
};
pub use records::{
    aggregate, mean_std, read_records, run_matrix, write_records, CellKey, CellSummary,
    MatrixReport, ResultRecord, RunFailure, RECORD_SCHEMA,
};
pub use report::ReportGrid;
pub use train::{
    accuracy, build_model, evaluate, final_average, predict_logits, prepare_stream,
    pretrain_classes, pretrain_saliency_for, pretrain_set, run_experiment, train_online, Evaluation, PretrainCache,
    RunOutput, StepLog, TrainOptions,
};

#[cfg(test)]
pub(crate) use records::planted;
