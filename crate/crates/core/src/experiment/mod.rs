//! Config files, metrics streams and the experiment commands behind the
//! `cose-loop` binary.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod plot;

pub use commands::{
    cmd_ablate, cmd_plot, cmd_run, cmd_sweep, cmd_trace, ComparisonTable, RunSummary, SweepAxis,
};
pub use config::{Overrides, RunConfig};
