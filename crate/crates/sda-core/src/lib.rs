//! Score-based data assimilation for dense 2-D multi-channel fields.
//!
//! Given a denoiser encoding a prior over gridded states, this crate
//! reconstructs full fields (and calibrated ensembles of fields) from sparse,
//! noisy point observations via diffusion posterior guidance, and evaluates
//! the results with probabilistic verification metrics.
//!
//! Modules map onto the pipeline stages:
//!
//! * [`field`] - grid state, channel transforms, normalization
//! * [`schedule`] - variance-preserving noise schedule and the exact adapter
//!   between denoiser and noise-prediction parameterizations
//! * [`denoiser`] - the prior: analytic Gaussian and trainable convolutional
//!   backends behind one contract, plus the training loop
//! * [`obs`] - observation sets, selection operators, observation noise
//! * [`guidance`] - posterior score assembly, predictor-corrector sampling,
//!   ensemble generation
//! * [`metrics`] - MSE/MAE, fair CRPS, spread, rank histograms, sweeps,
//!   climate diagnostics
//! * [`io`] - grid/observation/checkpoint file formats, station
//!   preprocessing, synthetic Gaussian-random-field datasets
//! * [`oracle`] - closed-form linear-Gaussian references used for
//!   verification (Kalman posterior, exact marginal scores)

pub mod denoiser;
pub mod error;
pub mod field;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod obs;
pub mod oracle;
pub mod schedule;

pub use error::{Result, SdaError};
pub use field::{ChannelSpec, Ensemble, FieldGrid, NormStats, Transform};
