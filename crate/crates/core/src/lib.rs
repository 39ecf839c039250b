//! Feynman-Kac interacting particle systems, their auxiliary q-particle
//! systems, and the empirical U-statistics built on them.

pub mod asymptotics;
pub mod auxiliary;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod simulate;
pub mod statistics;

pub use error::{Error, Result};
