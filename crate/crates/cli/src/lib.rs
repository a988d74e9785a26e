//! Experiment runner for `fedsa-core`: config files, metrics files, the
//! bundled benchmark presets and the verification subcommands behind the
//! `fedsa` binary.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod run;
