//! Adversarial VAE whose discriminator reads the batch statistics of image
//! patches, used as a covariate-shift out-of-distribution detector.
//!
//! This crate is the allocation-only core: tensors and reverse-mode
//! differentiation, normalization layers, the encoder/generator/discriminator
//! networks, the training objectives and step, patch sampling, image
//! corruptions and detection metrics. Everything touching the filesystem lives
//! in the `discopatch` companion crate.
//!
//! The crate builds without `std` (it needs `alloc`); the default `std`
//! feature only enables runtime CPU dispatch in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corrupt;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod patching;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, PixelSource, Rgb8};
pub use model::{DisCoPatch, ModelConfig, NormKind};
pub use norm::{GroupLayout, NormMode, NormState, StatsSource};
pub use patching::PatchBatch;
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
pub use train::{LossWeights, TrainConfig, Trainer};
