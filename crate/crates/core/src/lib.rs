//! Online intensity tracking and network learning for multivariate Hawkes
//! processes observed in discrete time bins.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod events;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod netlearn;
pub mod projections;
pub mod simulate;
pub mod tracker;

pub use error::{Error, ErrorClass, Result};
