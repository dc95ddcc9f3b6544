//! Experiment harness for the meta-learning engine: config resolution,
//! training and sweep drivers, CSV metrics, and SVG plots.

pub mod config;
pub mod plot;
pub mod runner;

pub use config::{FileConfig, Overrides, RunConfig, TaskSel};
pub use plot::{emit_plot, PlotKind};
pub use runner::{run_gradcheck, run_sweep_lr, run_sweep_query, run_train, CliError};
