//! Advection-diffusion-reaction simulation and parameter estimation for
//! packed-bed chromatography.

pub mod adr;
pub mod chroma;
pub mod dg;
pub mod error;
pub mod esdirk;
pub mod estimation;
pub mod hybrid;
pub mod optimizers;

pub use error::{Error, Result};
