//! Self-training under distribution shift, at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithm of the
//! lab: a from-scratch linear softmax classifier, the confidence-anchored
//! temporal ensemble that regularizes pseudo labels, ELR and GCE baselines,
//! the adaptation engine, calibration and model-selection metrics, synthetic
//! covariate-shift generators, and numerical checks of the concentration and
//! neighborhood-size guarantees. File formats, configuration and the CLI live
//! in the `ancon-lab` companion crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ancon;
pub mod data;
pub mod elr;
mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selftrain;
pub mod theory;

pub use error::{Error, Result};
pub use model::{LinearParams, Minibatch, ProbVec, SoftTarget};
