//! Benchmark harness around `r2diff-core`: artifact file formats, the TOML
//! experiment configuration, the condition-grid runner, and report/chart
//! emission. The `r2diff` binary is a thin CLI over these modules.

pub mod config;
pub mod formats;
pub mod report;
pub mod runner;
pub mod svg;
