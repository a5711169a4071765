pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub mod traffic;
pub mod metrics;
pub mod models;
pub mod remap;
pub mod generator;
pub mod defenses;
