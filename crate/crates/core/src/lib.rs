pub mod assignment;
pub mod attractors_eda;
pub mod attractors_ta;
pub mod commands;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod scoring;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
