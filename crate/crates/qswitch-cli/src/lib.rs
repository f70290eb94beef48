//! Experiment front end for the switch laboratory: subcommand
//! implementations, bundled self-checking presets, and deterministic
//! artifact writers shared by the `qswitch` binary and its tests.

pub mod commands;
pub mod pool;
pub mod presets;
pub mod report;
