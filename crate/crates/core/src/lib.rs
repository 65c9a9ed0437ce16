//! Simulator for asynchronous master/worker composite optimization.
//!
//! Machine 0 is the master: it owns loss `L_1`, solves a proximal subproblem
//! each round and combines stale gradients from the remote workers `1..m`.
//! The remote side is a deterministic discrete-event simulation with a
//! bounded-delay barrier, a communication ledger and a virtual clock.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod cli;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod master;
pub mod problems;
pub mod prox;
pub mod telemetry;

/// Dense iterate `x in R^p`.
pub type ParamVector = nalgebra::DVector<f64>;

pub use algorithms::{evaluate_f, run, run_edanni, run_proxgrad_ps, Algorithm, RunConfig, RunResult};
pub use error::{Error, Result};
pub use problems::{Problem, Regularizer, SmoothLossSet};
