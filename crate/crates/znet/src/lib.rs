//! File formats, run configuration and the `znet` command line on top of
//! `znet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod logs;
pub mod workers;
pub mod zvol;
