//! Self-supervised point-cloud completion by octant inpainting.
//!
//! A partial cloud is split into eight octant regions, some regions are
//! dropped at random, and a two-level (global + per-region) encoder/decoder
//! learns to restore the full partial cloud and, across views, the whole
//! object. Everything runs on a small reverse-mode autodiff engine in
//! double precision.

pub mod assignment;
pub mod autodiff;
pub mod baseline;
pub mod cloud;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod spatial;
pub mod train;

pub use cloud::{PointCloud, RigidPose};
pub use error::{Error, Result};
