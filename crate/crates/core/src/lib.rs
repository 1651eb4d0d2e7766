//! Few-shot styled handwriting generation with a latent denoising model.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod style;
pub mod style_ops;
pub mod text;
pub mod toy;

pub use error::{Error, ErrorKind, Result};
