//! Bayesian inference for multivariate space-time conditionally
//! autoregressive (MSTCAR) models of areal rate data.

// Negated comparisons below reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod covariance;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod io;
mod linalg;
pub mod model;
pub mod random;
pub mod sampler;
pub mod simstudy;

pub use error::{Error, Result};
pub use linalg::is_spd;
