//! Cascaded photometric bundle adjustment over a density voxel grid.
//!
//! The pipeline jointly optimizes noisy or missing camera poses and a
//! volumetric scene, staged coarse -> recursive -> fine, with keypoint-based
//! detection of bad poses and neighbor replacement between stages.

pub mod ba;
pub mod cascade;
pub mod config;
pub mod criterion;
pub mod error;
pub mod eval;
pub mod img;
pub mod io;
pub mod render;
pub mod replace;
pub mod scene;
pub mod se3;

pub use error::{CbarfError, Result};

/// Derive a named sub-seed from the global run seed so that each random
/// component (scene, noise, rays, drop, ...) gets an independent stream.
pub fn sub_seed(global: u64, name: &str) -> u64 {
    // FNV-1a over the seed bytes then the stream name.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in global.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
