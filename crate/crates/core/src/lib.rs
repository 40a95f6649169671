//! Superpixel graph contrastive clustering for hyperspectral images.
//!
//! The pipeline reduces a hyperspectral cube with PCA, pre-trains a hybrid
//! 3-D/2-D convolutional VAE on per-pixel cubes, segments the image into
//! superpixels, and clusters the superpixel graph with a dual-branch GCN
//! trained by sample-level alignment and cluster-center contrast.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod graph;
pub mod hsi_io;
pub mod metrics;
pub mod rng;
pub mod segmentation;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
