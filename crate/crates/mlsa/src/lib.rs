//! File formats, configuration and the end-to-end pipeline around
//! `mlsa-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::CliError;
