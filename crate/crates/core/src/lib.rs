//! Desk-scale toolkit for optimising physically constrained adversarial
//! cubes against a small multispectral cloud detector.
//!
//! The pipeline has four stages, each its own module:
//!
//! 1. [`spectra`] — build a spectral index (band-integrated, solar-weighted
//!    apparent reflectances) from a paint material library.
//! 2. [`cubes`] — synthetic multispectral scenes with cloud masks, the MSC1
//!    cube file format, and dataset assembly.
//! 3. [`detector`] — a compact CNN cloud classifier with two-stage training
//!    and mitigation variants (more input bands, wider, deeper).
//! 4. [`attack`] + [`eval`] — adversarial cube parametrization, the
//!    multi-objective loss (bias + non-printability + cloaking), Adam
//!    optimization under embedding augmentations, and effectiveness metrics.
//!
//! Everything is built on [`grad`], a minimal reverse-mode differentiation
//! engine whose gradients are validated against central differences.

pub mod attack;
pub mod cubes;
pub mod detector;
pub mod error;
pub mod grad;
pub mod rng;
pub mod spectra;

pub use error::{Error, Result};
