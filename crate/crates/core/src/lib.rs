pub mod datasets;
pub mod error;
pub mod experiments;
pub mod inversion;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod substitution;
pub mod training;
pub mod unlearning;

pub use error::{Error, Result};
