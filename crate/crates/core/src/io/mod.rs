//! On-disk formats: dataset manifests, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod manifest;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use config::RunConfig;
pub use manifest::{ingest, write_dataset, DatasetHandle, Manifest};
