//! Audio-visual generalized zero-shot learning engine.
//!
//! A two-branch feed-forward model maps audio-visual features and class
//! label embeddings into a shared space; classification picks the nearest
//! class embedding, optionally calibrated against seen-class bias.

pub mod data;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
