//! Covariance-hyperprior variational autoencoder.
//!
//! A VAE whose latent covariance carries an inverse-Wishart hyperprior,
//! trained with a closed-form ELBO, plus a β-VAE baseline, the
//! CorrelatedEllipses dataset and a majority-vote disentanglement metric.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metric;
pub mod nn;
pub mod trainer;
pub mod validation;

pub use error::{Error, Result};
