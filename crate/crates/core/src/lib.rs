//! Patch-level lesion voxel counting with a small 3D CNN trained under a
//! Poisson likelihood.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
