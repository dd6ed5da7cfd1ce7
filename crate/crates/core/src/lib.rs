//! Unsupervised anomaly detection by MAP restoration under a learned normative prior.
//!
//! A VAE or Gaussian-mixture VAE is trained on healthy images. A new image is
//! restored by gradient ascent on `ELBO(X) - lambda * TV(X - Y)`, and the
//! residual `|Y - X|` is the anomaly score. The crate covers the whole
//! workflow: synthetic data, prior training, restoration, calibration of the
//! data-consistency weight and of detection thresholds, and evaluation.

pub mod calibration;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod figures;
pub mod image;
pub mod nn;
pub mod prior;
pub mod restoration;
pub mod synth;

pub use error::{Error, Result};
