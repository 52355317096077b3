//! Command-line host for `trajformer-core`: configuration, file formats,
//! a thread-pool executor and the subcommands that tie the pipeline
//! together.

pub mod commands;
pub mod config;
pub mod io;
pub mod pool;
