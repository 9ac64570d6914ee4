//! Pipelines behind the `pemoe` binary.

pub mod commands;
pub mod pipeline_config;
