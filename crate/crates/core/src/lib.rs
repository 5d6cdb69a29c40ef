//! Self-supervised sparse generative completion of partial 3D scans.
//!
//! The crate covers the whole pipeline: synthetic scenes and depth cameras,
//! TSDF fusion, self-supervised scan pairs, a sparse autograd engine, the
//! hierarchical completion network, training, marching cubes and metrics.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod mesh;
pub mod model;
pub mod pipeline;
pub mod selfsup;
pub mod synthcam;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
