//! Learning black-box generator emulators from terminal-bus telemetry.
//!
//! The crate simulates a single-machine infinite-bus plant under stochastic
//! shunt faults, turns the resulting `(P, Q, V, phi)` telemetry into
//! supervised datasets, and fits two competing emulators: a vector
//! auto-regressive model with exogenous inputs and a weight-dropped LSTM.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod faults;
pub mod lstm;
pub mod plant;
pub mod rng;
pub mod series;
pub mod var;

pub use error::{Error, Result};
pub use series::MultiSeries;
