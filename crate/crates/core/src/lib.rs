//! Tangent convolutions for semantic segmentation of point clouds.
//!
//! The pipeline: read or synthesize a labeled [`io::PointCloud`], quantize it
//! and build a multi-level [`precompute::Hierarchy`] of tangent-image
//! selection plans, then run the U-shaped [`network`] on top of the
//! reverse-mode [`engine`] and train/evaluate it with [`train`].

pub mod engine;
pub mod geometry;
pub mod io;
pub mod network;
pub mod par;
pub mod precompute;
pub mod spatial;
pub mod train;

pub use io::{PointCloud, UNLABELED};
