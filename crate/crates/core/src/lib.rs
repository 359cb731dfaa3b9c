//! Learned point cloud codec specialized for classification.
//!
//! A PointNet-style analysis transform maps a point cloud to a short latent
//! vector. The latent is rounded, range coded with a learned factorized
//! entropy model and decoded straight into class logits. Around that core
//! sit the dataset pipeline, rate-accuracy training and evaluation,
//! Bjøntegaard-Delta metrics and the reconstruction/critical-point analysis
//! tools.

mod binio;
pub mod error;
pub mod nn;
pub mod entropy;
pub mod data;
pub mod codec;
pub mod bitstream;
pub mod train;

pub use error::{Error, Result};
