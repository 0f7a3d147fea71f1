//! Noise schedules for the forward/reverse processes and the exact algebraic
//! adapter between the denoiser parameterization D(x; sigma) and the
//! noise-prediction parameterization eps(x_tilde, tau).
//!
//! The variance-preserving (VP) schedule is
//!
//! ```text
//! mu(tau)      = cos(omega * tau),   omega = arccos(sqrt(1e-3))
//! sigma_s(tau) = sqrt(1 - mu^2)
//! ```
//!
//! so that mu(0) = 1, mu(1) = sqrt(1e-3), and mu^2 + sigma_s^2 = 1 exactly.
//! A denoiser trained at noise level sigma serves VP time tau when queried at
//! the equivalent level sigma = sigma_s(tau) / mu(tau).

use crate::denoiser::Denoiser;
use crate::error::{Result, SdaError};
use crate::field::FieldGrid;

/// Variance-preserving schedule with mu(tau) = cos(omega*tau).
#[derive(Debug, Clone, Copy)]
pub struct VpSchedule {
    omega: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        VpSchedule {
            omega: (1e-3f64).sqrt().acos(),
        }
    }
}

impl VpSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    fn check_tau(tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(SdaError::domain(format!("tau must be in [0, 1], got {tau}")));
        }
        Ok(())
    }

    /// mu(tau) = cos(omega*tau), strictly decreasing from 1 to sqrt(1e-3).
    pub fn mu(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        Ok((self.omega * tau).cos())
    }

    /// sigma_s(tau) = sqrt(1 - mu^2) = sin(omega*tau).
    pub fn sigma_s(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        Ok((self.omega * tau).sin())
    }

    /// The equivalent denoiser noise level sigma_s(tau)/mu(tau) = tan(omega*tau).
    ///
    /// Returns 0 at tau = 0, where the denoiser query is skipped entirely.
    pub fn edm_sigma_equivalent(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        Ok((self.omega * tau).tan())
    }
}

/// Uniform tau grid: strictly decreasing from 1 to 0 inclusive, length n+1.
pub fn tau_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(SdaError::config(format!("step count must be >= 2, got {n}")));
    }
    Ok((0..=n).map(|i| (n - i) as f64 / n as f64).collect())
}

/// Translate a denoiser D into the noise-prediction parameterization at VP
/// time tau:
///
/// ```text
/// eps(x_tilde, tau) = (x_tilde/mu - D(x_tilde/mu; sigma_s/mu)) * mu/sigma_s
/// ```
///
/// Equivalently -sigma_s times the score of the VP marginal at time tau.
pub fn adapt_denoiser_to_eps(
    denoiser: &dyn Denoiser,
    x_tilde: &FieldGrid,
    tau: f64,
    schedule: &VpSchedule,
) -> Result<FieldGrid> {
    if tau <= 0.0 || tau > 1.0 {
        return Err(SdaError::domain(format!(
            "adapter requires tau in (0, 1], got {tau}"
        )));
    }
    let mu = schedule.mu(tau)?;
    let sigma_s = schedule.sigma_s(tau)?;
    let sigma = schedule.edm_sigma_equivalent(tau)?;

    let x_edm = x_tilde.with_data(x_tilde.data().iter().map(|v| v / mu).collect())?;
    let denoised = denoiser.evaluate(&x_edm, sigma)?;
    let scale = mu / sigma_s;
    let data = x_edm
        .data()
        .iter()
        .zip(denoised.data())
        .map(|(x, d)| (x - d) * scale)
        .collect();
    x_tilde.with_data(data)
}

/// Noise-level grid for samplers that walk sigma directly from sigma_max down
/// to sigma_min and then to 0.
#[derive(Debug, Clone, Copy)]
pub struct EdmSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    /// Grid warping exponent; 7 is the framework convention.
    pub rho: f64,
}

impl Default for EdmSchedule {
    fn default() -> Self {
        EdmSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            n_steps: 64,
            rho: 7.0,
        }
    }
}

impl EdmSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > 0.0) {
            return Err(SdaError::config("sigma_min and sigma_max must be > 0".to_string()));
        }
        if sigma_min >= sigma_max {
            return Err(SdaError::config(format!(
                "sigma_min {sigma_min} must be < sigma_max {sigma_max}"
            )));
        }
        if n_steps < 2 {
            return Err(SdaError::config(format!("step count must be >= 2, got {n_steps}")));
        }
        Ok(EdmSchedule {
            sigma_min,
            sigma_max,
            n_steps,
            rho: 7.0,
        })
    }

    /// Strictly decreasing sigma grid from sigma_max to sigma_min, then 0.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        let inv_rho = 1.0 / self.rho;
        let a = self.sigma_max.powf(inv_rho);
        let b = self.sigma_min.powf(inv_rho);
        let mut grid: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                (a + t * (b - a)).powf(self.rho)
            })
            .collect();
        grid.push(0.0);
        grid
    }
}
