//! Disentangled latent encoding of implied-volatility surfaces.
//!
//! A PCA variational auto-encoder maps each 8 x 7 surface to a small
//! latent vector whose coordinates are pushed towards independence. The
//! encoding supports scenario sweeps, completion of partially observed
//! surfaces, and inference of single-stock surfaces from an index.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod extrapolate;
pub mod latent;
pub mod lbfgs;
pub mod neural;
pub mod stock;
pub mod surface;
pub mod synth;
pub mod vae;
pub mod wire;

pub use error::{Error, Result};
