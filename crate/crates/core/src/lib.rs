//! Diffusion actor-critic for offline reinforcement learning: noise schedule
//! and sampler, offline datasets, critic ensemble, guided actor, trainer and
//! evaluation tooling.

mod error;

pub mod actor;
pub mod bench;
pub mod critic;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod plot;
pub mod trainer;
pub mod verify;

pub use error::{DacError, Result};
