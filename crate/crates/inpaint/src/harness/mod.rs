//! Training orchestration, inference, and the CLI.

pub mod cli;
pub mod dataset;
pub mod imageio;
pub mod pipeline;
pub mod stages;

pub use dataset::{ingest_dataset, Dataset};
pub use pipeline::{explore, hard_blend, infer, Pipeline};
pub use stages::{load_pipeline, run_evaluate, run_train_coarse, run_train_latent, run_train_stage3, train_stage3};
