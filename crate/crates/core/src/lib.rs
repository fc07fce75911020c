//! Deterministic simulator of decentralized federated graph learning with a
//! learned controller for worker topology and graph sampling ratios.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod ddpg;
pub mod error;
pub mod gcn;
pub mod graphdata;
pub mod netmodel;
pub mod orchestrator;
pub mod policies;
pub mod rng;
pub mod worker;

pub use error::{Error, Result};
pub use orchestrator::{run, RunOutcome, SimConfig, Simulation};
