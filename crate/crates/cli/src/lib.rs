//! Experiment pipeline for layer-grouped sparse autoencoders: capture,
//! layer distances, clustering, training, evaluation, causal analysis and
//! reporting, all driven from a run directory.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{Session, TrainTarget};
pub use config::ExperimentConfig;
pub use manifest::{ExperimentManifest, RunSummary, SaeEntry};

/// Process exit code for an error: 2 configuration, 3 data or format,
/// 4 storage, 5 training, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use sae_groups::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Format { .. } | Error::Corruption { .. } | Error::Shape(_)) => 3,
        Some(Error::Storage { .. }) => 4,
        Some(Error::Training { .. } | Error::Numeric(_)) => 5,
        None => 1,
    }
}
