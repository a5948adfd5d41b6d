//! Files, configuration and the command line around `rc3-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};
