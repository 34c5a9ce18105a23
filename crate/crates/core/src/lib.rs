//! Successor features, inverse temporal-difference learning and generalised
//! policy improvement from reward-free, multi-agent demonstrations.

pub mod agent;
pub mod demo;
pub mod error;
pub mod grid;
pub mod harness;
pub mod itd;
pub mod loss;
pub mod nn;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
