//! Sparse variational Gaussian process classification trained directly from
//! crowdsourced labels.
//!
//! A multi-class GP classifier (robust-max likelihood, shared inducing inputs)
//! is coupled with per-annotator Dirichlet confusion-matrix posteriors and
//! per-instance true-label responsibilities. All of them are fitted jointly by
//! maximizing a minibatch estimate of the evidence lower bound.

pub mod cli;
pub mod crowd;
pub mod data_io;
pub mod error;
pub mod kernel;
pub mod likelihood;
pub mod metrics;
pub mod optim;
pub mod simulator;
pub mod sparse_gp;
pub mod special;
pub mod trainer;

pub use error::{Result, SvgpcrError};
