//! Discrete birds-eye-view codebooks for LiDAR point clouds.
//!
//! The crate covers the whole pipeline at desk scale: a procedural LiDAR simulator
//! ([`scenes`]), BEV voxelization ([`voxel`]), a small dense autodiff core ([`nncore`]),
//! vector quantization with dead-code revival ([`codebook`]), the VQ-VAE with its
//! sparse-to-dense completion path ([`vqvae`]), a masked-token generator over code maps
//! ([`generator`]), distribution metrics ([`metrics`]), and the command-line driver
//! ([`cli`]).

pub mod cli;
pub mod codebook;
pub mod codemap;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod nncore;
pub mod pointcloud;
pub mod scenes;
pub mod voxel;
pub mod vqvae;

pub use pointcloud::PointCloud;
