//! Single-pixel imaging toolkit: structured-illumination simulation plus
//! classical and untrained-network reconstruction.
//!
//! A single-pixel camera never forms an image on a sensor array. The scene is
//! modulated by a sequence of binary patterns (here: rows of a Walsh-Hadamard
//! matrix displayed on a DMD) and a bucket detector records one intensity per
//! pattern. Reconstruction turns that 1-D signal back into an image:
//!
//! * [`classical::dgi`] — differential ghost imaging, a closed-form estimate.
//! * [`classical::tv_reconstruct`] — total-variation regularized least squares.
//! * [`neural::gan_solve`] / [`neural::gidc_solve`] — fits an untrained
//!   convolutional generator to the measured signal through the physics of the
//!   acquisition, optionally with an adversarial critic on the signal domain.
//!
//! [`pipeline`] runs the whole acquire/reconstruct cycle per spectral channel
//! to recover a hyperspectral cube. Everything is deterministic given a seed.

pub mod adam;
pub mod classical;
pub mod cube;
pub mod error;
pub mod fixtures;
pub mod forward;
mod format;
mod hash;
pub mod layers;
pub mod metrics;
pub mod networks;
pub mod neural;
pub mod patterns;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
