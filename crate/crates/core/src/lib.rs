//! Pseudo-ground-truth 3D pose pairs for people in close contact.
//!
//! The crate turns 2D keypoints and contact annotations from a vision-language
//! model into fitted pairs of articulated bodies, and ships a diffusion prior
//! over such pairs together with a synthetic scene generator for evaluation.

pub mod ask;
pub mod body;
pub mod denoise;
pub mod geometry;
pub mod gradcheck;
pub mod keypoints;
pub mod losses;
pub mod optimize;
pub mod pipeline;
pub mod prior;
pub mod synth;
pub mod taxonomy;
