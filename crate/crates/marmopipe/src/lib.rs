//! File formats, configuration, stage orchestration and the command line for
//! the tracer-image pipeline. The algorithms live in `marmopipe-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod formats;
pub mod nn;
pub mod pipeline;

pub use config::{ConfigError, PipelineConfig};
pub use pipeline::{run_pipeline, RunReport, StageStatus};
