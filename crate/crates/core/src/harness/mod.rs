//! Training loop, evaluation metrics, ablations, checkpoints and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use config::TrainConfig;
pub use metrics::{evaluate, MetricsReport};
pub use train::{ablate, train, Adam, EpochRecord, TrainOutcome};
