//! SaaFormer: a spectral-spatial axial aggregation transformer for
//! hyperspectral patch classification, built on a small tape-based
//! autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, the reverse-mode [`Tape`](numerics::Tape)
//!   and a finite-difference gradient checker.
//! - [`layers`]: linear, normalisation, convolution, activation, dropout,
//!   loss and the Adam optimizer.
//! - [`attention`]: axial aggregation attention with positional biases and
//!   the auxiliary convolutional path.
//! - [`encoder`]: spectral partitioning, the shifted/wrapped pass and the
//!   multi-level fusion.
//! - [`model`]: the end-to-end classifier, training loop and checkpoints.
//! - [`dataflow`]: cube/label I/O, synthetic scenes, random and block-wise
//!   splitting, and the overlap-rate leakage audit.
//! - [`metrics`]: confusion matrices, OA / AA / Kappa.

pub mod attention;
pub mod dataflow;
pub mod encoder;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
