//! Training, evaluation and diagnostics for CSC networks driven by a flat
//! `key=value` configuration.

pub mod commands;
pub mod config;
pub mod train;

pub use config::{DatasetKind, RunConfig, DATA_ENV};
