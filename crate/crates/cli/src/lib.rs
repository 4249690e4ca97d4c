//! Experiment runner: config loading, K* sweeps and result summaries.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod summary;
pub mod sweep;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use summary::{summarize, GroupSummary};
pub use sweep::{run_sweep, MetricsRow, RunStatus, SweepError, SweepOutput};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const ORACLE: i32 = 3;
}
