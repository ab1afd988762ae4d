//! Command-line experiments for routed attention: training, evaluation,
//! parameter sweeps and gate-trace analysis.

pub mod commands;
pub mod config;

pub use commands::{cmd_analyze, cmd_eval, cmd_sweep, cmd_train, exit_code, run_experiment, Precision};
pub use config::{ConfigError, ExperimentConfig};
