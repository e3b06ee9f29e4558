//! Config-driven experiments: the TOML schema, run directories and the CLI commands.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    cmd_compare_schedules, cmd_flatness, cmd_soup, cmd_swa_train, cmd_train, ComparisonReport, LoadedConfig,
    RunOptions, RunResult,
};
pub use config::{DatasetKind, ExperimentConfig, ScheduleVariant};
