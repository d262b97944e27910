//! File formats, configuration, the grid runner and reports for `ancon-core`.
//! The `ancon` binary is a thin clap front end over this crate.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};
