//! Registration and triangulation supervision for landmark detectors.
//!
//! The crate bundles the numeric pieces needed to train a landmark detector
//! with unlabeled multi-view video:
//!
//! * [`tensor`]: sampled 2D fields with bilinear access and derivatives.
//! * [`camera`]: DLT triangulation, projection and their Jacobians.
//! * [`flow`]: inverse-compositional Lucas-Kanade tracking, flow-field
//!   interpolation, heatmap warping and the forward-backward check.
//! * [`supervision`]: detection, registration and triangulation losses with
//!   analytic gradients and reliability masks.
//! * [`detector`]: a toy convolutional detector, Adam, batch assembly and the
//!   two-stage training loop.
//! * [`synth`]: a deterministic synthetic multi-view video generator.
//! * [`metrics`]: NME, AUC, failure rate and P-error.
//! * [`experiment`]: configuration and the commands behind the `srt` binary.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod supervision;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
