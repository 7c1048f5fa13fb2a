//! Hedging and pricing on diffusion markets whose volatility matrix may be
//! singular.
//!
//! The hedge is the projected Clark-Ocone integrand: pathwise Malliavin
//! derivatives from first-variation processes, a Girsanov correction,
//! least-squares Monte Carlo for the conditional expectations and a
//! minimal-norm solve of `sigma^T theta = P(x) rhs`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod backtest;
pub mod config;
pub mod error;
pub mod hedging;
pub mod linalg;
pub mod measure;
pub mod model;
pub mod payoff;
pub mod regression;
pub mod rng;
pub mod scalar;
pub mod sde;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type Projection = linalg::Projection<f64>;
