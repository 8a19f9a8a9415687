//! Data provisioning, persistence, metrics and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{ArchConfig, ExperimentConfig, Overrides};
pub use data::{gen_synthetic_dataset, load_idx, write_idx, DatasetSpec};
pub use experiment::{evaluate_checkpoint, gen_data, run_experiment, SeedSummary, Stages, StageSummary};
pub use metrics::{read_metrics, write_metrics, METRICS_HEADER};
