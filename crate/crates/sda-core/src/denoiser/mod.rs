//! The prior: denoiser backends behind a common contract.
//!
//! A denoiser maps a noisy field at noise level sigma to an estimate of the
//! clean field; it defines the score via (D(x; sigma) - x)/sigma^2. Two
//! backends are provided: an exact Gaussian conditioning backend used for
//! verification, and a trainable convolutional backend.

mod conv;
mod gaussian;
pub mod train;

pub use conv::{ConvArch, ConvDenoiser};
pub use gaussian::{ChannelKernel, GaussianAnalyticDenoiser, GridCovariance, GrfSampler};
pub use train::{edm_train_step, train, TrainConfig, TrainLog, Trainer};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SdaError};
use crate::field::{ChannelSpec, FieldGrid, NormStats};

/// Contract every prior backend satisfies: evaluation D(x; sigma) and the
/// exact vector-Jacobian product of the evaluation with respect to x.
pub trait Denoiser: Send + Sync {
    /// Estimate of the clean field given `x` at noise level `sigma`.
    /// Must be the identity at sigma = 0.
    fn evaluate(&self, x: &FieldGrid, sigma: f64) -> Result<FieldGrid>;

    /// Reverse-mode derivative: cotangent^T dD/dx.
    fn vjp(&self, x: &FieldGrid, sigma: f64, cotangent: &FieldGrid) -> Result<FieldGrid>;

    fn channels(&self) -> &[ChannelSpec];
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn norm(&self) -> &NormStats;

    /// Zero grid with this backend's layout and normalization stats.
    fn template_grid(&self) -> Result<FieldGrid> {
        FieldGrid::zeros(
            self.channels().to_vec(),
            self.height(),
            self.width(),
            self.norm().clone(),
        )
    }
}

/// Score of the smoothed density at level sigma: (D(x; sigma) - x)/sigma^2.
pub fn score_from_denoiser(x: &FieldGrid, sigma: f64, denoiser: &dyn Denoiser) -> Result<FieldGrid> {
    if sigma <= 0.0 {
        return Err(SdaError::domain(format!(
            "score requires sigma > 0, got {sigma}"
        )));
    }
    let d = denoiser.evaluate(x, sigma)?;
    let inv = 1.0 / (sigma * sigma);
    x.with_data(
        d.data()
            .iter()
            .zip(x.data())
            .map(|(d, x)| (d - x) * inv)
            .collect(),
    )
}

/// Validate a backend's vjp against central finite differences of
/// g(x) = <cotangent, D(x; sigma)> along `directions` random unit directions.
/// Returns the maximum relative error observed.
pub fn vjp_finite_difference_check(
    denoiser: &dyn Denoiser,
    x: &FieldGrid,
    sigma: f64,
    cotangent: &FieldGrid,
    directions: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(SdaError::domain(format!(
            "finite-difference check requires sigma > 0, got {sigma}"
        )));
    }
    let grad = denoiser.vjp(x, sigma, cotangent)?;
    let scale = x.data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let h = 1e-4 * scale;
    let mut max_rel: f64 = 0.0;
    for _ in 0..directions {
        let mut u: Vec<f64> = (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in &mut u {
            *v /= norm;
        }
        let xp = x.with_data(x.data().iter().zip(&u).map(|(a, b)| a + h * b).collect())?;
        let xm = x.with_data(x.data().iter().zip(&u).map(|(a, b)| a - h * b).collect())?;
        let gp = inner(cotangent.data(), denoiser.evaluate(&xp, sigma)?.data());
        let gm = inner(cotangent.data(), denoiser.evaluate(&xm, sigma)?.data());
        let fd = (gp - gm) / (2.0 * h);
        let an = inner(grad.data(), &u);
        let denom = fd.abs().max(an.abs()).max(1e-8);
        max_rel = max_rel.max((fd - an).abs() / denom);
    }
    Ok(max_rel)
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
