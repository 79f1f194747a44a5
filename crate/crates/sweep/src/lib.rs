//! Experiment orchestration for the `coopspin` command line: config parsing
//! with physical units, deterministic parallel sweeps, and run directories
//! of plot-ready tables.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;
pub mod record;
pub mod units;
