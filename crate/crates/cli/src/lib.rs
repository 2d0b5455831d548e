//! Experiment driver: configuration, stroke extraction dumps, training runs,
//! backtests with reports and plots.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use commands::{cmd_backtest, cmd_extract, cmd_synth, cmd_train, BacktestOutcome, RunManifest};
pub use config::{Overrides, RunConfig};
pub use error::CliError;
