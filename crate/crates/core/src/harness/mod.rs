//! Data generation and I/O, forget splits, configuration and experiment driving.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod splits;

pub use config::{apply_override, DataConfig, ExperimentConfig, FractionBase, ModelConfig, OutputConfig, PartitionConfig};
pub use dataset::{gen_gaussian_classes, load_dataset, save_dataset, Dataset, SplitTag};
pub use experiment::{
    ablate, pretrain, round_splits, run_experiment, run_sources, write_outputs, ArmRecord, RepeatRecord, RoundReport,
    RunRecord,
};
pub use splits::{make_splits, make_splits_in_pool, ForgetMode, ForgetSpec, Splits};
