//! Interactive volumetric segmentation with feature-distilled radiance fields.
//!
//! A radiance field with semantic and feature heads is fit to a posed RGB-D
//! sequence. Precomputed per-frame image features are compressed by an
//! autoencoder and distilled into the field, and sparse pixel labels are
//! propagated into dense 2D segmentations.

pub mod encoding;
pub mod error;
pub mod features;
pub mod field;
pub mod nn;
pub mod objective;
pub mod real;
pub mod rendering;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
