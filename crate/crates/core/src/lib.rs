//! Training-free two-stage data pruning for large image corpora.
//!
//! Stage I drops low-information images by grayscale Shannon entropy. Stage II
//! learns prior centroids on a curated reference set with spherical k-means,
//! assigns every surviving sample to its nearest centroid, and fills a fixed
//! budget with equal per-cluster quotas of the most central samples, spending
//! any leftover budget on the globally most similar remaining candidates.

pub mod assign;
pub mod baselines;
pub mod bench;
pub mod cluster;
pub mod config;
pub mod embedding;
pub mod entropy;
pub mod error;
pub mod linalg;
pub mod manifest;
pub mod pipeline;
pub mod raster;
pub mod sample;
pub mod seed;
pub mod textio;

pub use error::{Error, Result};
