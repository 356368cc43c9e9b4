//! Disentangled contrast harmonization for 2D MR slices.
//!
//! A source slice is split into a contrast-invariant anatomy map (β) and
//! re-rendered by a style-conditioned decoder. The style comes from either a
//! target image or a textual acquisition prompt, embedded into one shared
//! space by a contrastively pretrained encoder pair.

pub mod anatomy;
mod blocks;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod metadata;
pub mod phantom;
pub mod rng;
pub mod style_encoders;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
