//! Active RIS-configuration design for uplink localization: scene and
//! channel simulation, the recurrent sensing policy, baselines and the
//! experiment harness.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod policy;
pub mod radiomap;
pub mod rng;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
