//! Rician-noise diffusion tensor estimation.
//!
//! The estimator treats each squared magnitude as the second stage of a
//! Poisson-Gamma hierarchy. Conditional on a latent Poisson count the
//! likelihood is a GLM, so the EM sweep reduces to closed-form updates for
//! the noise variance and baseline signal plus a stabilised Fisher-scoring
//! loop for the tensor coefficients.
//!
//! Module map:
//!
//! * [`rician`]: Bessel kernels, the Rician density, the latent-count
//!   expectation and a seeded Rician sampler.
//! * [`tensor`]: order-2 and order-4 diffusivity models, design rows,
//!   eigen-decomposition, FA / MD and positivity diagnostics.
//! * [`em`]: ML and MAP estimation by EM with stabilised Fisher scoring.
//! * [`baselines`]: LS / WLS on log-magnitudes and direct maximisation of
//!   the Rician log-likelihood.
//! * [`synth`]: acquisition schemes, ground truths and synthetic datasets.
//! * [`metrics`]: SNR curves, MSE tables and fitted signal curves.
//! * [`io`], [`config`], [`batch`], [`cli`]: file formats, `key = value`
//!   configuration, the parallel voxel driver and the command-line surface.

pub mod baselines;
pub mod batch;
pub mod cli;
pub mod config;
pub mod em;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod report;
pub mod scheme;
pub mod rician;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
