//! Memory-driven visual query localization as plain numerical algorithms.
//!
//! The crate is organized the way a frame flows through the system:
//!
//! * [`numerics`]: dense tensors, same-padded convolution with its adjoints,
//!   Gaussian labels, connected components and 1D median filtering.
//! * [`amm`]: the appearance memory. A weighted ridge objective over stored
//!   (feature, mask) samples is minimized by steepest descent with exact line
//!   search to produce the segmentation filter.
//! * [`glm`]: the localization memory. A static/dynamic snapshot bank drives a
//!   correlation filter fitted with a hinge/least-squares residual and
//!   Gauss-Newton step lengths.
//! * [`fusion`]: merges both branches into a probability mask, extracts boxes
//!   and localizes the last temporal occurrence.
//! * [`geo3d`]: similarity alignment, pinhole back-projection, confidence
//!   weighting and multi-view aggregation.
//! * [`pipeline`]: per-query orchestration of all of the above.
//!
//! Backbone features, masks, poses and depth are inputs; nothing here runs a
//! neural network.

pub mod amm;
pub mod crop;
mod error;
pub mod fusion;
pub mod geo3d;
pub mod glm;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
