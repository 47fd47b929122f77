//! Nonparametric transfer learning at desk scale.
//!
//! A pre-trained network is linear-probed on a downstream task, the probe's
//! predictions define a finite base measure over the downstream inputs, and
//! posterior samples are obtained by minimizing Dirichlet-weighted losses over
//! the data and the pseudo data, one independent optimization per sample.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod diagnostics;
pub mod dirichlet;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod matrix;
pub mod models;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod transfer;

pub use error::{NptlError, Result};
pub use matrix::Matrix;
