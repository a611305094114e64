//! Fourier ptychography simulation and reconstruction.
//!
//! The library covers the full loop: an angular-illumination forward model
//! with pupil and defocus, synthetic dataset generation with optional noise,
//! analytic gradients for the object spectrum, pupil, defocus distance and
//! per-LED intensity factors, three update regimes (sequential, global,
//! random batches), and file formats for datasets and results.

pub mod config;
pub mod container;
pub mod error;
pub mod export;
pub mod field;
pub mod forward;
pub mod gradient;
pub mod metrics;
pub mod optics;
pub mod optimizer;
pub mod reconstruct;

pub use error::{FpmError, Result};
