//! Training harness: configs, datasets, metrics, checkpoints, and the
//! train/compare/diagnose entry points behind the `cbn` binary.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod dataset;
pub mod diagnose;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod trainer;

pub use error::{HarnessError, HarnessResult};
