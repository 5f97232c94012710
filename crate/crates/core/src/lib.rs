//! Groupwise deformable registration of low-SNR image series.
//!
//! A weight-tied displacement network registers K noisy source frames to a
//! noisy target; a parameter-free mean layer averages the warped sources and
//! training compares that average against a clean reference, either by local
//! cross-correlation or in the space of a learned noise-robust edge detector.
//!
//! Module map:
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`warp`]: coordinate grids, displacement fields, bilinear warping, mean layer
//! - [`losses`]: local CC, MSE, smoothness and the pairwise/group objectives
//! - [`edge`]: Sobel baseline and the trainable edge detector
//! - [`model`]: the displacement network and the four method variants
//! - [`phantom`]: synthetic breathing series with ground-truth fields
//! - [`metrics`]: rSNR, SSIM, endpoint error and series evaluation
//! - [`pipeline`]: preprocessing, training, inference, file formats, ablation

pub mod edge;
mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
