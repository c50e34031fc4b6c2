//! Self-supervised dual-domain diffusion reconstruction for accelerated MRI.
//!
//! The pipeline trains a conditional diffusion model from under-sampled
//! k-space alone: acquired k-space is randomly split into two partitions,
//! three weight-shared branches denoise the full and partitioned inputs, and
//! consistency losses in both the image domain and the measured k-space
//! locations supervise the network without any fully sampled reference.
//! Inference runs the reverse chain several times from independent noise
//! draws; the per-pixel mean is the reconstruction and the per-pixel standard
//! deviation is an uncertainty estimate.
//!
//! Module map:
//! - [`kspace`]: complex image / k-space algebra, coil handling, variable
//!   density masks, partition splitting
//! - [`schedule`]: diffusion variance schedule and the forward process
//! - [`backbone`]: the lightweight hybrid attention network and the data
//!   consistency layer
//! - [`losses`]: the dual-domain self-supervised objective
//! - [`trainer`]: three-branch training loop, Adam, checkpoints
//! - [`inference`]: reverse sampling and multi-path aggregation
//! - [`metrics`]: PSNR / SSIM / MAE / PCC evaluation
//! - [`data`]: synthetic phantom dataset generation and the on-disk format
//! - [`config`]: the run configuration file shared by all CLI commands

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod kspace;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{DmsmError, Result};
