//! Run configuration, stage orchestration, figures and reports for the
//! branch-generation pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::{smoke_config, stage_seed, RunConfig};
pub use error::{PipelineError, Result};
pub use pipeline::{Pipeline, RunManifest, Stage};
