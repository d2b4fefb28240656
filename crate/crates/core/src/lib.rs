//! Full counting statistics of snapshot density measurements on two
//! interfering Bose-Einstein condensate clouds in Fock states.
//!
//! The crate computes exact snapshot probabilities for small systems (with
//! two independent brute-force oracles), samples fringe images for
//! macroscopic clouds via the hidden-phase mixture of fixed-phase
//! multinomials, and provides the estimation layer on top: least-squares
//! phase assignment, Fisher-information confidence widths, estimator
//! calibration, the phase distribution of repeated runs, and the entropy of
//! the fixed-phase distribution.
//!
//! Modules mirror the pipeline:
//!
//! - [`physics`]: cloud modes under free expansion, phase-locked densities
//! - [`binning`]: measurement mesh, count strings, coarse graining
//! - [`fcs`]: generating function, exact probabilities, oracles, correlators
//! - [`sampling`]: reproducible snapshot generation
//! - [`estimation`]: phase fits, Cramer-Rao widths, calibration, entropy
//! - [`cli`]: deterministic batch commands and file formats

pub mod binning;
pub mod cli;
pub mod error;
pub mod estimation;
pub mod fcs;
pub mod grid;
pub mod physics;
pub mod sampling;
pub mod stats;

pub use error::{Error, Result};
