//! Range-aware diffusion for LiDAR point-cloud densification.
//!
//! Pipeline: a deterministic structural prior ([`prior`]) proposes candidate
//! rays, a compact Point-BEV denoiser ([`network`]) refines only the range
//! along each ray with partial DDIM diffusion ([`diffusion`]), and an
//! occupancy head drops rays that traverse free space. Training uses a
//! physics-aware composite loss ([`training`]) on synthetic sweeps from the
//! built-in simulator ([`scene`]); [`metrics`] scores the result.

pub mod assignment;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod prior;
pub mod scene;
pub mod spatial;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud, Ray, RayDecomposition, ScanlineAttr};
