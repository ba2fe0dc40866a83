pub mod attack;
pub mod autograd;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod models;
pub mod obfuscate;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
