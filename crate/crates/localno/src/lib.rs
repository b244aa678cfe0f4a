//! Local neural-operator layers: constrained differential convolutions,
//! discrete-continuous integral convolutions, and truncated-Fourier spectral
//! convolutions, composed into trainable models.

pub mod basis;
pub mod data;
pub mod differential;
pub mod disco;
pub mod error;
pub mod field;
pub mod geometry;
pub mod model;
pub mod random;
pub mod spectral;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
