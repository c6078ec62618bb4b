//! Task-decoupled class-specific object removal at desk scale: synthetic
//! data, curation, networks, losses, training and evaluation.

pub mod curation;
pub mod data;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod manifest;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
