//! Learned editing space for global color and tone edits.

pub mod editops;
pub mod error;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod latent_analysis;
pub mod lgie;
pub mod metrics;
pub mod spacesearch;
pub mod training;

pub use error::{Error, Result};
pub use image::{Image, Mask};
