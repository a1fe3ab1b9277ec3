//! Adaptive token sampling for vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, a differentiation tape and a seeded RNG.
//! - [`attention`]: multi-head self-attention exposing its intermediates.
//! - [`ats`]: significance scoring, inverse-transform token sampling and
//!   attention row refinement.
//! - [`model`]: a small ViT with sampling stages and its weight file.
//! - [`flops`]: analytic multiply-accumulate accounting from token traces.
//! - [`dataset`]: synthetic cluttered-shape images and PGM I/O.
//! - [`trainer`]: AdamW with a cosine schedule, training and fine-tuning.

pub mod attention;
pub mod ats;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
