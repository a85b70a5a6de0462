//! Patch-level NeRF reconstruction for video snapshot compressive imaging.
//!
//! A single coded measurement is explained by a radiance field rendered at
//! `N` virtual camera poses. The field is a hash-grid encoder followed by
//! a dual-path transformer whose attention runs both along each ray
//! (intra-ray) and across the rays of a spatial window at equal depth
//! (inter-ray). Scene and the two boundary poses are fitted jointly with a
//! masked measurement loss plus total variation on rendered windows.

pub mod config;
pub mod container;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rayformer;
pub mod renderer;
pub mod sci;
pub mod training;

pub use error::{Error, Result};
