//! Inference-time watermark optimization for deterministic diffusion sampling.
//!
//! A structure watermark is folded into the initial latent and a detail
//! watermark replaces the stochastic term of one late DDIM step. Both are
//! optimized so that a fixed feature extractor followed by carrier projections
//! decodes a chosen message from the final sample. Gradients come from a
//! discrete adjoint sweep that keeps a constant number of grid buffers.

pub mod adjoint;
pub mod attacks;
pub mod codec;
pub mod diffusion;
pub mod error;
mod format;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod optimize;
pub mod watermark;

pub use error::{Error, Result};
pub use grid::{LatentGrid, Shape};
