//! Bayesian posterior inference with Cressie-Read empirical likelihoods built
//! on M-estimating equations.

pub mod cressie_read;
pub mod data;
pub mod error;
pub mod estimating;
pub mod expansion;
pub mod experiments;
pub mod posterior;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{CrelError, Result};
