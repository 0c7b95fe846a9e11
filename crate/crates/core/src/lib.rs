//! Change-point detection for one-jump piecewise deterministic Markov processes.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod dp;
pub mod error;
pub mod filter;
pub mod io;
pub mod kernel;
pub mod model;
pub mod policy;
pub mod quantize;
pub mod rng;

pub use error::{Error, Result};
