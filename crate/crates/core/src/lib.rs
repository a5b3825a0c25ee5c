//! Personalized diffusion-based face restoration.
//!
//! A small latent-diffusion restoration denoiser conditioned on a low-quality
//! image, personalized per identity through zero-gated cross-attention
//! adapters over a frozen base. The crate is `no_std` + `alloc`; enable the
//! `std` feature for runtime CPU dispatch in the matrix kernels and the
//! `serde` feature for (de)serializable records.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod autograd;
pub mod data;
pub mod degradation;
pub mod denoiser;
pub mod diffusion;
pub mod face;
pub mod image;
pub mod latent;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use latent::LatentCode;
