//! Simulation of twin-beam, noise-reduced phase retrieval with the
//! transport-of-intensity equation.
//!
//! The pipeline runs bottom-up through the modules:
//! [`source`] → [`optics`] → [`detector`] → [`quantumcorr`] → [`tie`] →
//! [`metrics`], with [`scenario`] tying a JSON experiment description to
//! reproducible on-disk outputs.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod metrics;
pub mod optics;
pub mod quantumcorr;
pub mod raster;
pub mod rng;
pub mod scenario;
pub mod source;
pub mod tie;
pub mod wavefield;

pub use error::{Error, Result};
