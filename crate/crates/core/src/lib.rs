//! Asynchronous online federated learning simulator.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod orchestrate;
pub mod server;
pub mod sim;
pub mod theory;

pub use error::{Error, Result};
