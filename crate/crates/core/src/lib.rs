//! Joint-diffusion panorama generation engine.
//!
//! Reverse diffusion runs independently over overlapping windows of one
//! panorama; each denoising step optionally pulls every window's predicted
//! denoised observation toward an anchor window by gradient descent on a
//! perceptual loss (synchronization), samples the next noise level per
//! window, and then averages the windows back into panorama space
//! (latent-average fusion). Analytic denoisers (Gaussian mixtures, point
//! masses) make the whole pipeline verifiable in closed form; a small
//! trainable MLP denoiser stands in for a learned backbone.

pub mod error;
pub mod grid;
pub mod rng;
pub mod schedule;
pub mod panorama;
pub mod losses;
pub mod models;
pub mod samplers;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod io;
pub mod metrics;
pub mod par;
pub mod render;
pub mod sync;
pub mod texture;

pub use error::{Error, Result};
pub use grid::ImageGrid;
