//! Restoration of JPEG-compressed images with a single-step latent
//! diffusion model.
//!
//! The crate is organised around a small reverse-mode autodiff engine in
//! [`tensor`]; everything else (the JPEG degradation codec, the semantic
//! prompt extractor, the quality-factor/timestep predictor, the latent
//! autoencoder and denoiser, the losses, and the two training stages) is
//! built on top of it. All numerics are `f64`, all randomness flows through
//! explicitly seeded generators, and training runs single threaded, so any
//! run is reproducible bit for bit from its seed.

pub mod ckpt;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod image;
pub mod jpeg;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod saipe;
pub mod tensor;
pub mod text;
pub mod timestep;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Arr, Grads, Tensor};
