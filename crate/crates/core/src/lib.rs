//! Conditional Gaussian distribution learning for open set recognition.
//!
//! A probabilistic ladder autoencoder is trained so that the latent posterior
//! of each known class approximates its own Gaussian. At test time a sample
//! is accepted as known only if it falls inside some class Gaussian and its
//! reconstruction error stays below a threshold calibrated on training data.

pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod ladder;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
