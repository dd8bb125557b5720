//! Semi-supervised variational autoencoder for galaxy vote-fraction
//! prediction, built on a small reverse-mode autodiff engine.
//!
//! The encoder canonicalizes image rotation before encoding: a pose
//! predictor estimates a rotation angle from the polar representation of
//! the image, the image is rotated back by that angle, and the encoder
//! consumes the resulting polar map, in which any residual rotation is a
//! circular shift along the angular axis. The decoder produces a polar
//! map and the inverse transform restores the original orientation. A
//! small classifier maps the posterior mean to a 3-way vote-probability
//! vector trained against volunteer vote counts under a multinomial
//! likelihood.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff, Adam.
//! - [`geometry`]: differentiable bilinear sampling, rotation, and the
//!   Cartesian/polar transforms.
//! - [`et`]: pose prediction and canonicalization.
//! - [`vae`]: the VAE model, ELBO, and checkpointing.
//! - [`classifier`]: vote-fraction head, multinomial NLL, RMSE metric.
//! - [`data`]: synthetic galaxy corpus and external image ingestion.
//! - [`trainer`]: the four training regimes and evaluation.
//! - [`harness`]: resumable sweep over (regime, label budget, seed).

pub mod classifier;
pub mod data;
pub mod error;
pub mod et;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod seeding;
pub mod tensor;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
