//! Command line front end: run configuration, dataset pipelines and the
//! `geofuse` subcommands.

pub mod app;
pub mod commands;
pub mod config;
pub mod pipeline;
