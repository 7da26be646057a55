//! Configuration-driven front end for maximum-likelihood IRL experiments.
//!
//! An experiment lives in one directory below the output root:
//! `config.toml`, `env.json`, `demos.jsonl` with its `expert.json` sidecar,
//! then `run/` (or `sweep/seed-N/`) holding `diagnostics.csv`, checkpoints
//! and `run.json`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
