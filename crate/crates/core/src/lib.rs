//! Probabilistic dense correspondence estimation.
//!
//! The crate is organized bottom-up:
//!
//! - [`mixture`]: the constrained mixture-of-Laplace predictive distribution
//!   (density, stable negative log-likelihood, confidence `P_R`, gradients).
//! - [`geometry`]: flow fields, homographies, bilinear warping and flow
//!   composition.
//! - [`datagen`]: the synthetic training-pair factory with moving objects
//!   and injective / occlusion masks.
//! - [`model`]: a small two-level pyramidal matcher with hand-written
//!   reverse-mode gradients and its trainer.
//! - [`inference`]: confidence-driven match extraction, RANSAC homographies,
//!   multi-stage and multi-scale refinement, sparse keypoint matching.
//! - [`metrics`]: AEPE, PCK, Fl, sparsification / AUSE and pose metrics.
//! - [`io`]: `.flo`, PFM, PPM, key=value config and dataset layout.

pub mod config;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod image;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod mixture;
pub mod model;

pub use error::{Error, Result};
pub use geometry::{FlowField, Homography};
pub use image::{Image, Mask};
pub use mixture::{ConstraintSpec, MixtureParams};
