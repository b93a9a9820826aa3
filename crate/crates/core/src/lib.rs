//! Point-cloud semantic segmentation with dual local attention.
//!
//! The crate is organised bottom-up: a small reverse-mode autodiff engine,
//! neighbourhood search and sampling over point clouds, the attention
//! feature extractor, the encoder/decoder network, training and evaluation,
//! and dataset I/O.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod dla;
pub mod geometry;
pub mod layers;
pub mod network;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
