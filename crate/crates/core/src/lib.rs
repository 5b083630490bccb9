//! Causality-aware event-level video question answering over precomputed
//! clip features.

pub mod autograd;
pub mod causal;
pub mod data;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod linguistic;
pub mod model;
pub mod nn;
pub mod params;
pub mod stt;
pub mod synthetic;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
