// index-style loops match the array kernels; negated comparisons reject NaN
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]

//! Monte-Carlo engine for continuous-time principal-agent contracting with
//! randomised (measure-valued) effort controls.
//!
//! The pipeline: simulate the reference noise mixture cell by cell, drive the
//! output process, compute the agent's best response by pointwise Hamiltonian
//! maximisation, solve the continuation-value backward equation by regression
//! Monte Carlo, generate contracts forward from an initial utility and a
//! sensitivity policy, and search the principal's constrained objective with
//! a cross-entropy optimiser. Statistical verifiers check the martingale and
//! orthogonality structure the construction promises.

pub mod agent;
pub mod bsde;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod measure;
pub mod model;
pub mod principal;
pub mod rng;
pub mod stats;
pub mod weakform;

pub use error::{Error, Result};
