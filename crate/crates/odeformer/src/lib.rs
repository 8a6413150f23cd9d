//! Host-side companion to `odeformer-core`: dataset and checkpoint files,
//! run configuration, report writers, a rayon-backed executor and the
//! commands behind the `odeformer` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod exec;
pub mod report;

pub use config::RunConfig;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use exec::Pool;
