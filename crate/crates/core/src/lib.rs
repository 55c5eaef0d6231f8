//! Pose-free 3D-aware GAN training on a desk-sized budget.
//!
//! A tri-plane radiance-field generator is rendered through an
//! emission-absorption ray marcher and a small super-resolution stack. Three
//! discriminator designs are supported: pose-conditioned, pose-regressing, and
//! an implicit pose embedding trained with InfoNCE over same-pose image pairs.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core carries no IO.
//! File formats, configuration and the command line live in the `contranerf`
//! companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dataset;
pub mod discriminator;
mod error;
pub mod generator;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod render;
pub mod rng;
pub mod superres;
pub mod trainer;

pub use error::{Error, Result};
