//! Synthetic dataset generation for vision-based tactile sensors.
//!
//! The gel is a transparent elastomer seeded with a thin layer of spherical
//! particles. A camera below the gel observes particle motion when the surface
//! is indented. This crate turns displacement fields (from FEM or an analytic
//! half-space model) into optical-flow feature images, bins nodal contact
//! forces into force-distribution labels, and supports fisheye-to-pinhole
//! remapping plus extrinsic refinement against real features.

// `!(x > 0.0)` style checks are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fields;
pub mod flow;
pub mod geometry;
pub mod pipeline;
pub mod remap;
pub mod visibility;

pub use error::{Error, Result};
