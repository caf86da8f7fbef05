//! Seam-filling peg-in-hole system: simulator, renderer, data generation,
//! perception networks, policies, baselines and benchmarks.

pub mod baselines;
pub mod bench;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod perception;
pub mod pipeline;
pub mod policy;
pub mod render;
pub mod shapes;
pub mod sim;

pub use error::{Result, SfnError};
