//! Pose-free neural LiDAR fields with geometry-guided pose optimization.
//!
//! The crate jointly registers a sequence of LiDAR scans and fits a small
//! neural field to them. Poses are refined by alternating two phases:
//! bundle-adjusting optimization of the field and poses against rendered range
//! images, and pure geometric optimization of a graph-based robust Chamfer
//! loss between the scans.

pub mod cloud;
pub mod field;
pub mod geo;
pub mod geometry;
pub mod metrics;
pub mod optim;
pub mod range_image;
pub mod scene;
pub mod spatial;
pub mod trainer;

pub use cloud::PointCloud;
pub use geometry::{Mat3, Mat4, Se3Param, Trajectory, Vec3, Vec6};
pub use range_image::{RangeImage, ScannerConfig};
