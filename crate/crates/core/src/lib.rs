//! Reflection-aware self-supervised depth: photometric losses, an intrinsic
//! log-residual decomposition, Mahalanobis reflection masking, depth-teacher
//! fusion, and deterministic oracle scenes to test them on.

pub mod camera;
pub mod cli;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod intrinsic;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod photometric;
pub mod pipeline;
pub mod reflection;
pub mod synthetic;
pub mod trainer;

pub use camera::{Camera, Intrinsics, Pose};
pub use error::{Error, Result};
pub use image::{BinaryMask, DepthMap, Domain, ImageBuffer};
