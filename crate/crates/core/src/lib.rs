//! Memory-efficient subspace optimization with structured-sparse gradient
//! projections.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod distsim;
pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod projection;
pub mod runner;

pub use error::{Error, Result};
