//! Configuration, presets, experiment pipelines and run persistence.

pub mod config;
pub mod csv_io;
pub mod experiments;
pub mod presets;
pub mod rundir;
pub mod svg;
