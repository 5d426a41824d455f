//! End-to-end orchestration: datasets, configuration, the staged run with its
//! manifest, and reporting.

pub mod config;
pub mod dataset;
pub mod io;
pub mod report;
pub mod run;

pub use config::{BackgroundSource, PipelineConfig, Profile};
pub use dataset::{ingest_dataset, read_pairs, synth_toy_dataset, Background, Dataset, Layout, Split, Splits};
pub use report::{report, Report};
pub use run::{replay_generation, run_pipeline, RunManifest, StageStatus, STAGES};
