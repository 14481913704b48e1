//! Reverse Imaging for cardiac MR at desk scale.
//!
//! Infers per-voxel spin properties (PD, T1, T2) from a single qualitative
//! MR image by guiding a reverse diffusion process with the acquisition's
//! physics forward model, then re-renders the recovered properties under
//! arbitrary other sequences.
//!
//! The crate is organized around the pipeline:
//!
//! - [`phantom`] — synthetic ground-truth spin maps of a cardiac short-axis
//!   slice, the oracle for every downstream stage;
//! - [`physics`] — the bSSFP / MOLLI / GRE / mSASHA signal equations, their
//!   analytic gradients, and the squared-residual data fidelity;
//! - [`fitting`] — per-voxel (A, T1, T2) extraction from an mSASHA stack by
//!   bounded Levenberg–Marquardt;
//! - [`diffusion`] — DDPM noise schedule, forward noising, reverse sampler,
//!   and analytic score models (Gaussian, mixture, sample-bank KDE);
//! - [`reverse`] — the physics-guided posterior sampler with Tweedie
//!   estimates, in source-inversion and target-to-source modes;
//! - [`synthesis`] — cross-sequence rendering and augmentation stacks;
//! - [`io`] — raw `f32` + JSON sidecar persistence and PGM previews;
//! - [`metrics`] — RMSE/PSNR and per-class statistics for oracle checks.
//!
//! See the crate examples for one runnable program per capability, or the
//! `spinrev` binary for the subcommand pipeline.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fitting;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod physics;
pub mod raster;
pub mod reverse;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
pub use raster::Raster;
