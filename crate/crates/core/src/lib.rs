//! Voxel-based LiDAR vehicle detection.
//!
//! The pipeline runs a point cloud through a fixed voxel grid, a sparse 3D
//! convolution encoder that collapses to a bird's-eye-view (BEV) feature map,
//! a two-branch context encoder whose segmentation probabilities re-weight the
//! detection features, and a detection head partitioned along the forward axis
//! into overlapping parts with their own kernel sizes and dilations.
//!
//! Everything is CPU-only, 64-bit, and deterministic under a fixed seed.

pub mod box_geom;
pub mod config;
pub mod depth_head;
pub mod error;
pub mod eval_metrics;
pub mod kitti_io;
pub mod network;
pub mod nn_core;
pub mod seg_context;
pub mod sparse_conv;
pub mod train;
pub mod voxel_grid;

pub use box_geom::{Box3D, Detection};
pub use error::{Error, Result};
pub use kitti_io::PointCloud;
pub use nn_core::{FeatureMap, Graph, ParamStore, Tensor, Var};
pub use voxel_grid::{SparseVoxelGrid, VoxelizerConfig};
