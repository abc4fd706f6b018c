//! Content/style-disentangled low-rank adaptation on a toy diffusion
//! denoiser: rank-limited backbone projection, frequency-split contrastive
//! pairs, disjoint-layer adapters and asymmetric classifier-free guidance.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod image;
pub mod optim;
pub mod pairgen;
mod par;
pub mod perceptual;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod subspace;
pub mod tensorcore;

pub use backbone::{Layer, LayeredBackbone};
pub use par::set_threads;
pub use error::{Error, Result};
pub use image::ImageGrid;
pub use tensorcore::Matrix;
