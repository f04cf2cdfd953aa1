//! File formats, datasets and experiment drivers around `discopatch-core`.

pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod synth;

pub use error::{Error, Result};
