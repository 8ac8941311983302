//! Concept-guided co-salient object detection.
//!
//! The crate learns a shared text-space concept from a group of related images
//! with a frozen latent diffusion model, segments the common object in every
//! image from the concept's cross-attention, and provides the evaluation
//! metrics and image corruptions used to benchmark the results.

pub mod backend;
pub mod concept;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod segmentation;
pub mod synthetic;
pub mod viz;

pub use error::{Error, Result};
