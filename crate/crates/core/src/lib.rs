//! Masked multi-frame camera pre-training on synthetic driving clips.
//!
//! Images are masked, lifted into a voxel grid, fused across time and
//! supervised by SDF volume rendering of a dropped frame. Everything runs
//! on a small f64 reverse-mode tape.

pub mod container;
pub mod diffcore;
pub mod encoder;
pub mod geometry;
pub mod masking;
pub mod params;
pub mod renderer;
pub mod rng;
pub mod scenegen;
pub mod temporal;
pub mod trainer;
