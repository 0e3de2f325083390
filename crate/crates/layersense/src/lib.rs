//! Layer-sensitivity benchmark toolkit.
//!
//! Generates a dataset of trained networks on two-moons data with measured
//! per-layer importance rankings, scores attribution criteria against them
//! and drives the pruning, quantization and fault-tolerance applications.
//! The numerical engine lives in [`layersense_core`].

pub mod applications;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod generate;
pub mod report;
pub mod store;

pub use config::{Overrides, RunConfig};
pub use error::{AppError, Result};
pub use layersense_core as core;
