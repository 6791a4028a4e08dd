//! Occupancy-grid toolkit for radar/camera driving scenes.
//!
//! The crate covers four areas that share one voxel-grid data model:
//!
//! * [`grid`] / [`geometry`] — metric voxel grids, voxelization, rigid
//!   transforms, pinhole projection, and the interpolation kernels used
//!   everywhere else.
//! * [`fusion`] — forward-numeric reference implementations of the fusion
//!   blocks (pillar encoding, height self-attention, local adaptive fusion,
//!   deformable cross-attention, temporal alignment, occupancy head) with
//!   explicit, injectable weights.
//! * [`losses`] — the composite occupancy training loss with analytic
//!   gradients, checkable against finite differences.
//! * [`pseudolabel`] / [`metrics`] — the pseudo-occupancy-label pipeline
//!   (object extraction, noise filtering, point-image semantics, temporal
//!   aggregation, staged nearest-neighbor matching) and IoU-family metrics.
//!
//! File formats (MOCG grids, MOPC point clouds, MOSM masks, MOBW weights,
//! JSON poses/cameras/boxes) live in [`io`]; synthetic scene generators for
//! tests and demos live in [`fixtures`].

pub mod config;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pseudolabel;

pub use error::{Error, Result};
