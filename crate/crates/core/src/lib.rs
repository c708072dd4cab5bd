//! Learning sampling-time control policies for diffusion-style samplers by
//! minimizing an f-divergence between expert and policy state occupancy measures.

pub mod config;
pub mod divergence;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod mdp;
pub mod nn;
pub mod occupancy;
pub mod oracle;
pub mod policy;
pub mod ratio;
pub mod rng;
pub mod sampler;
pub mod snapshot;
pub mod tabular;
pub mod target;
pub mod train;

pub use error::{Error, Result};
