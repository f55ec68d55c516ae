//! Dataset IO, checkpoints, run configuration, training runs, evaluation
//! and the HTTP inference service around `facialgan-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod runner;
pub mod server;
pub mod trainlog;
pub mod wire;

pub use error::{Error, Result};
