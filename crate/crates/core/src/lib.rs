//! Fourier neural operator surrogates for a forced two-mass oscillator.

pub mod autodiff;
pub mod cli;
pub mod container;
pub mod dynamics;
pub mod error;
pub mod fno;
pub mod losses;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod signals;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
