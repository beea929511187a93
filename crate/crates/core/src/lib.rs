//! Interactive multi-object segmentation of 3D point clouds driven by
//! click queries.
//!
//! A sparse voxel U-Net computes scene features once; each round of user
//! clicks is turned into queries that a small attention decoder refines
//! against those cached features, and per-click masks are fused into one
//! holistic labeling where every point belongs to exactly one region.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod clickquery;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pca;
pub mod registry;
pub mod simulator;
pub mod training;
pub mod scene;

pub use error::{Error, Result};
