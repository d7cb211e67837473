//! Command-line front end for the grain-coded image model: corpus tooling,
//! two-stage training, reconstruction and sampling, statistics, ablations,
//! and a gradient audit. The numerical core lives in the `graincode` crate;
//! this crate owns configs, checkpoints, metrics, and orchestration.

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dqtn;
pub mod fdsuite;
pub mod metrics;
pub mod train;

pub use commands::CommonArgs;
pub use config::RunConfig;
