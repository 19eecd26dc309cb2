//! Experiment orchestration: datasets, the staged pipeline, manifests and reports.

pub mod config;
pub mod data;
pub mod io;
pub mod pipeline;
pub mod report;

pub use config::{AblationCell, AblationGrid, DatasetSource, RunConfig, Seeds};
pub use data::{generate_synthetic_dataset, ingest_gallery, synthesize, SyntheticDatasetSpec};
pub use pipeline::{
    run_pipeline, run_pipeline_to, ExperimentManifest, Goal, StageRecord, StageStatus,
};
pub use report::emit_report;
