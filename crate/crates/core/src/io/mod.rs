//! Configuration, dataset files, reports and the command implementations.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod report;
pub mod synth;
