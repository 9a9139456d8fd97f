//! Conformal prediction sets for generative models that can only be sampled.
//!
//! An input's ensemble of generated responses is turned into a nonconformity
//! score (PCP's nearest-sample distance, or the negative log of the dominant
//! component of a K-means Gaussian mixture), a split-conformal threshold is
//! calibrated on held-out pairs, and the threshold is inverted into a union of
//! balls or ellipsoids whose coverage, volume and piece count are measured.

pub mod clustering;
pub mod conformal;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod genmodel;
pub mod mixture;
pub mod numerics;
pub mod oracles;
pub mod setgeometry;

pub use error::{Error, Result};
