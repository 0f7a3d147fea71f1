//! Posterior sampling: prior score plus likelihood score, predictor steps
//! over the tau grid, Langevin Monte Carlo corrections, and ensemble
//! generation.
//!
//! The likelihood of observations y given the noisy state x(tau) is modeled
//! as N(y | H(x_hat), V) with x_hat the denoised estimate and
//! V = R + (sigma_s^2/mu^2) * Gamma; its log-gradient flows through the
//! observation operator's adjoint and the full denoiser vjp, including the
//! 1/mu chain factor from the rescaling of the denoiser input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Result, SdaError};
use crate::field::{Ensemble, FieldGrid};
use crate::obs::{GridShape, ObsOperator, ObservationSet};
use crate::schedule::{tau_grid, VpSchedule};

/// Sampler knobs: steps N, corrections C, Langevin size tau_tilde, variance
/// inflation Gamma, default observation noise, and the base seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub n_steps: usize,
    pub corrections: usize,
    pub tau_tilde: f64,
    pub gamma: f64,
    /// Default per-channel observation noise std in normalized units,
    /// applied where an observation source carries no sigma of its own.
    pub sqrt_sigma_y: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            n_steps: 64,
            corrections: 2,
            tau_tilde: 0.3,
            gamma: 0.001,
            sqrt_sigma_y: 0.1,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    /// Preset for reconstructing a fully unobserved channel.
    pub fn missing_channel() -> Self {
        GuidanceConfig {
            n_steps: 256,
            corrections: 10,
            tau_tilde: 0.3,
            gamma: 0.01,
            sqrt_sigma_y: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(SdaError::config(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        if !(self.tau_tilde > 0.0) {
            return Err(SdaError::config("tau_tilde must be > 0".to_string()));
        }
        if !(self.gamma >= 0.0) {
            return Err(SdaError::config("gamma must be >= 0".to_string()));
        }
        if !(self.sqrt_sigma_y > 0.0) {
            return Err(SdaError::config("sqrt_sigma_y must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Observations y, the selection operator H, and the diagonal noise
/// covariance R binding them to a grid layout.
#[derive(Debug, Clone)]
pub struct LikelihoodModel {
    op: ObsOperator,
    y: Vec<f64>,
    r_diag: Vec<f64>,
}

impl LikelihoodModel {
    pub fn new(op: ObsOperator, y: Vec<f64>, r_diag: Vec<f64>) -> Result<Self> {
        if y.len() != op.output_dim() || r_diag.len() != op.output_dim() {
            return Err(SdaError::shape(format!(
                "operator selects {} entries, got {} values and {} variances",
                op.output_dim(),
                y.len(),
                r_diag.len()
            )));
        }
        if let Some(r) = r_diag.iter().find(|&&r| !(r > 0.0)) {
            return Err(SdaError::config(format!(
                "observation variances must be > 0, got {r}"
            )));
        }
        Ok(LikelihoodModel { op, y, r_diag })
    }

    /// Point observations with their own noise levels.
    pub fn from_observations(obs: &ObservationSet, shape: GridShape) -> Result<Self> {
        let op = obs.operator(shape)?;
        LikelihoodModel::new(op, obs.values(), obs.variances())
    }

    /// Observations taken from a grid through `op` (no added noise), with a
    /// single noise std for the diagonal of R.
    pub fn from_operator_values(op: ObsOperator, truth: &FieldGrid, sqrt_sigma: f64) -> Result<Self> {
        if !(sqrt_sigma > 0.0) {
            return Err(SdaError::config("sqrt_sigma must be > 0".to_string()));
        }
        let y = op.apply(truth)?;
        let n = y.len();
        LikelihoodModel::new(op, y, vec![sqrt_sigma * sqrt_sigma; n])
    }

    pub fn operator(&self) -> &ObsOperator {
        &self.op
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn variances(&self) -> &[f64] {
        &self.r_diag
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// One denoiser evaluation shared between the prior and likelihood terms.
struct ScoreParts {
    /// eps(x_tilde, tau) = -sigma_s * prior score.
    eps_prior: Vec<f64>,
    /// grad_x log p(y | x(tau)), absent without observations.
    lik_score: Option<Vec<f64>>,
}

fn score_parts(
    denoiser: &dyn Denoiser,
    lik: Option<&LikelihoodModel>,
    x: &FieldGrid,
    tau: f64,
    cfg: &GuidanceConfig,
    vp: &VpSchedule,
) -> Result<ScoreParts> {
    if tau <= 0.0 || tau > 1.0 {
        return Err(SdaError::domain(format!(
            "guidance scores require tau in (0, 1], got {tau}"
        )));
    }
    let mu = vp.mu(tau)?;
    let sigma_s = vp.sigma_s(tau)?;
    let sigma_e = vp.edm_sigma_equivalent(tau)?;

    let x_edm = x.with_data(x.data().iter().map(|v| v / mu).collect())?;
    let x_hat = denoiser.evaluate(&x_edm, sigma_e)?;
    let scale = mu / sigma_s;
    let eps_prior: Vec<f64> = x_edm
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(x, d)| (x - d) * scale)
        .collect();

    let lik_score = match lik {
        Some(l) if !l.is_empty() => {
            let h_xhat = l.op.apply(&x_hat)?;
            let v_extra = sigma_e * sigma_e * cfg.gamma;
            let mut weighted = vec![0.0; l.len()];
            for (k, ((y, h), r)) in l.y.iter().zip(&h_xhat).zip(&l.r_diag).enumerate() {
                let resid = y - h;
                if !resid.is_finite() {
                    return Err(SdaError::numerical(format!(
                        "non-finite observation residual at index {k} (tau = {tau})"
                    )));
                }
                weighted[k] = resid / (r + v_extra);
            }
            let mut cotangent = x.zeros_like();
            l.op.adjoint_into(&weighted, cotangent.data_mut());
            let pulled = denoiser.vjp(&x_edm, sigma_e, &cotangent)?;
            Some(pulled.data().iter().map(|v| v / mu).collect())
        }
        _ => None,
    };

    Ok(ScoreParts {
        eps_prior,
        lik_score,
    })
}

/// grad_x log p(y | x(tau)): the observation term of the posterior score.
pub fn likelihood_score(
    x_tau: &FieldGrid,
    tau: f64,
    denoiser: &dyn Denoiser,
    lik: &LikelihoodModel,
    cfg: &GuidanceConfig,
) -> Result<FieldGrid> {
    let parts = score_parts(denoiser, Some(lik), x_tau, tau, cfg, &VpSchedule::new())?;
    match parts.lik_score {
        Some(s) => x_tau.with_data(s),
        None => Ok(x_tau.zeros_like()),
    }
}

/// Full posterior score: prior score (from the adapted noise prediction)
/// plus the likelihood score. With no observations this is exactly the
/// prior score.
pub fn posterior_score(
    x_tau: &FieldGrid,
    tau: f64,
    denoiser: &dyn Denoiser,
    lik: Option<&LikelihoodModel>,
    cfg: &GuidanceConfig,
) -> Result<FieldGrid> {
    let vp = VpSchedule::new();
    let sigma_s = vp.sigma_s(tau)?;
    let parts = score_parts(denoiser, lik, x_tau, tau, cfg, &vp)?;
    let mut data: Vec<f64> = parts.eps_prior.iter().map(|e| -e / sigma_s).collect();
    if let Some(ls) = parts.lik_score {
        for (d, l) in data.iter_mut().zip(&ls) {
            *d += l;
        }
    }
    x_tau.with_data(data)
}

/// C iterations of x <- x + delta*s + sqrt(2*delta)*xi with the step size
/// recomputed from the instantaneous score: delta = tau_tilde * dim / |s|^2.
/// A zero score skips the iteration (the step size is undefined) with a
/// warning. C = 0 returns the input unchanged.
pub fn lmc_correct<F>(
    x_tau: &FieldGrid,
    score_fn: F,
    corrections: usize,
    tau_tilde: f64,
    rng: &mut impl Rng,
) -> Result<FieldGrid>
where
    F: Fn(&FieldGrid) -> Result<FieldGrid>,
{
    if !(tau_tilde > 0.0) {
        return Err(SdaError::config("tau_tilde must be > 0".to_string()));
    }
    let mut x = x_tau.clone();
    let dim = x.len() as f64;
    for _ in 0..corrections {
        let score = score_fn(&x)?;
        let norm2: f64 = score.data().iter().map(|s| s * s).sum();
        if norm2 == 0.0 {
            log::warn!("LMC correction skipped: score vanished (step size undefined)");
            continue;
        }
        let delta = tau_tilde * dim / norm2;
        let noise_scale = (2.0 * delta).sqrt();
        let data = x.data_mut();
        for (v, s) in data.iter_mut().zip(score.data()) {
            *v += delta * s + noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(x)
}

/// Per-member generator: stream `member` of the base seed's cipher.
fn member_rng(seed: u64, member: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    rng
}

fn check_lik_shape(denoiser: &dyn Denoiser, lik: Option<&LikelihoodModel>) -> Result<()> {
    if let Some(l) = lik {
        let expect = GridShape {
            channels: denoiser.channels().len(),
            height: denoiser.height(),
            width: denoiser.width(),
        };
        if l.op.shape() != expect {
            return Err(SdaError::shape(format!(
                "likelihood bound to {}x{}x{}, denoiser serves {}x{}x{}",
                l.op.shape().channels,
                l.op.shape().height,
                l.op.shape().width,
                expect.channels,
                expect.height,
                expect.width
            )));
        }
    }
    Ok(())
}

fn run_assimilation(
    denoiser: &dyn Denoiser,
    lik: Option<&LikelihoodModel>,
    cfg: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FieldGrid> {
    cfg.validate()?;
    check_lik_shape(denoiser, lik)?;
    let vp = VpSchedule::new();
    let taus = tau_grid(cfg.n_steps)?;

    let mut x = denoiser.template_grid()?;
    for v in x.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }

    for (step, pair) in taus.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let parts = score_parts(denoiser, lik, &x, t, cfg, &vp)?;
        let sigma_s_t = vp.sigma_s(t)?;
        let ratio = vp.mu(t_next)? / vp.mu(t)?;
        let eps_coeff = vp.sigma_s(t_next)? - ratio * sigma_s_t;
        {
            let data = x.data_mut();
            match &parts.lik_score {
                Some(ls) => {
                    for ((v, e), l) in data.iter_mut().zip(&parts.eps_prior).zip(ls) {
                        let eps_post = e - sigma_s_t * l;
                        *v = ratio * *v + eps_coeff * eps_post;
                    }
                }
                None => {
                    for (v, e) in data.iter_mut().zip(&parts.eps_prior) {
                        *v = ratio * *v + eps_coeff * e;
                    }
                }
            }
        }
        if let Some(bad) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(SdaError::numerical(format!(
                "non-finite state after predictor step {step} (tau {t} -> {t_next}, flat index {bad})"
            )));
        }
        if t_next > 0.0 && cfg.corrections > 0 {
            x = lmc_correct(
                &x,
                |state| {
                    let p = score_parts(denoiser, lik, state, t_next, cfg, &vp)?;
                    let ss = vp.sigma_s(t_next)?;
                    let mut data: Vec<f64> = p.eps_prior.iter().map(|e| -e / ss).collect();
                    if let Some(ls) = p.lik_score {
                        for (d, l) in data.iter_mut().zip(&ls) {
                            *d += l;
                        }
                    }
                    state.with_data(data)
                },
                cfg.corrections,
                cfg.tau_tilde,
                rng,
            )?;
            if let Some(bad) = x.data().iter().position(|v| !v.is_finite()) {
                return Err(SdaError::numerical(format!(
                    "non-finite state after corrections at step {step} (tau {t_next}, flat index {bad})"
                )));
            }
        }
    }
    Ok(x)
}

/// Draw one posterior sample: x(1) ~ N(0, I) in VP scaling, then predictor
/// steps over the tau grid with the posterior score, each followed by C
/// Langevin corrections. Deterministic given the config seed; the state is
/// returned in normalized space.
pub fn assimilate(
    denoiser: &dyn Denoiser,
    lik: Option<&LikelihoodModel>,
    cfg: &GuidanceConfig,
) -> Result<FieldGrid> {
    let mut rng = member_rng(cfg.seed, 0);
    run_assimilation(denoiser, lik, cfg, &mut rng)
}

/// One unconditional prior sample: [`assimilate`] without observations.
pub fn sample_unconditional(denoiser: &dyn Denoiser, cfg: &GuidanceConfig) -> Result<FieldGrid> {
    assimilate(denoiser, None, cfg)
}

/// Unconditional sample walking the sigma grid directly with Heun steps of
/// the probability-flow update dx = (x - D(x; sigma))/sigma dsigma, for
/// denoisers used outside the VP scaling.
pub fn sample_edm(
    denoiser: &dyn Denoiser,
    schedule: &crate::schedule::EdmSchedule,
    seed: u64,
) -> Result<FieldGrid> {
    let grid = schedule.sigma_grid();
    let mut rng = member_rng(seed, 0);
    let mut x = denoiser.template_grid()?;
    let sigma_max = grid[0];
    for v in x.data_mut() {
        *v = sigma_max * rng.sample::<f64, _>(StandardNormal);
    }
    for (step, pair) in grid.windows(2).enumerate() {
        let (s, s_next) = (pair[0], pair[1]);
        let h = s_next - s;
        let denoised = denoiser.evaluate(&x, s)?;
        let slope: Vec<f64> = x
            .data()
            .iter()
            .zip(denoised.data())
            .map(|(v, d)| (v - d) / s)
            .collect();
        let euler: Vec<f64> = x
            .data()
            .iter()
            .zip(&slope)
            .map(|(v, k)| v + h * k)
            .collect();
        if s_next > 0.0 {
            // Second-order correction with the slope at the target level.
            let euler_grid = x.with_data(euler.clone())?;
            let denoised2 = denoiser.evaluate(&euler_grid, s_next)?;
            for ((v, d2), (e, k1)) in x
                .data_mut()
                .iter_mut()
                .zip(denoised2.data())
                .zip(euler.iter().zip(&slope))
            {
                let k2 = (e - d2) / s_next;
                *v += h * 0.5 * (k1 + k2);
            }
        } else {
            x = x.with_data(euler)?;
        }
        if let Some(bad) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(SdaError::numerical(format!(
                "non-finite state after sigma step {step} ({s} -> {s_next}, flat index {bad})"
            )));
        }
    }
    Ok(x)
}

/// R independent [`assimilate`] draws with per-member generators derived
/// from the base seed (member r runs on stream r). Member order is
/// independent of the parallel schedule; any member failure aborts the
/// ensemble with the failed (index, stream, reason) list.
pub fn assimilate_ensemble(
    denoiser: &dyn Denoiser,
    lik: Option<&LikelihoodModel>,
    cfg: &GuidanceConfig,
    members: usize,
) -> Result<Ensemble> {
    if members == 0 {
        return Err(SdaError::config("ensemble size must be >= 1".to_string()));
    }
    cfg.validate()?;
    let results: Vec<Result<FieldGrid>> = (0..members)
        .into_par_iter()
        .map(|r| {
            let mut rng = member_rng(cfg.seed, r as u64);
            run_assimilation(denoiser, lik, cfg, &mut rng)
        })
        .collect();

    let mut grids = Vec::with_capacity(members);
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(g) => grids.push(g),
            Err(e) => failures.push((r, r as u64, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(SdaError::Ensemble(failures));
    }
    let seeds = (0..members as u64).collect();
    Ensemble::new(grids, seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianAnalyticDenoiser, GridCovariance};
    use crate::field::{ChannelSpec, NormStats};
    use crate::obs::Observation;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn channels(n: usize) -> Vec<ChannelSpec> {
        (0..n)
            .map(|i| ChannelSpec::identity(format!("ch{i}"), "1"))
            .collect()
    }

    fn unit_prior(side: usize) -> GaussianAnalyticDenoiser {
        let mean = FieldGrid::zeros(channels(1), side, side, NormStats::unit(1)).unwrap();
        let n = side * side;
        GaussianAnalyticDenoiser::from_covariance(mean, DMatrix::identity(n, n)).unwrap()
    }

    fn random_grid(side: usize, seed: u64) -> FieldGrid {
        let mut rng = member_rng(seed, 0);
        let data = (0..side * side)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        FieldGrid::new(channels(1), side, side, data, NormStats::unit(1)).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_likelihood_score() {
        let side = 4;
        let d = unit_prior(side);
        let x = random_grid(side, 1);
        let tau = 0.5;
        let vp = VpSchedule::new();
        // x_hat for the unit prior is mu * x_tilde; observe exactly that.
        let mu = vp.mu(tau).unwrap();
        let xhat = x.with_data(x.data().iter().map(|v| mu * v).collect()).unwrap();
        let op = ObsOperator::point_set(GridShape::of(&x), &[(0, 1, 1), (0, 2, 3)]).unwrap();
        let lik =
            LikelihoodModel::new(op.clone(), op.apply(&xhat).unwrap(), vec![0.01; 2]).unwrap();
        let cfg = GuidanceConfig::default();
        let s = likelihood_score(&x, tau, &d, &lik, &cfg).unwrap();
        assert!(s.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn scalar_chain_rule_small_tau() {
        // Gamma = 0, tau -> 0, identity H on a 1-pixel grid, R = Sigma:
        // score -> (y - x_hat)/Sigma * d(x_hat)/dx.
        let mean = FieldGrid::zeros(channels(1), 1, 1, NormStats::unit(1)).unwrap();
        let d = GaussianAnalyticDenoiser::from_covariance(mean, DMatrix::identity(1, 1)).unwrap();
        let x = FieldGrid::new(channels(1), 1, 1, vec![0.4], NormStats::unit(1)).unwrap();
        let tau = 1e-4;
        let vp = VpSchedule::new();
        let mu = vp.mu(tau).unwrap();
        let sigma_e = vp.edm_sigma_equivalent(tau).unwrap();
        let (y, sigma) = (1.0, 0.3);
        let op = ObsOperator::point_set(GridShape::of(&x), &[(0, 0, 0)]).unwrap();
        let lik = LikelihoodModel::new(op, vec![y], vec![sigma * sigma]).unwrap();
        let cfg = GuidanceConfig {
            gamma: 0.0,
            ..GuidanceConfig::default()
        };
        let s = likelihood_score(&x, tau, &d, &lik, &cfg).unwrap();
        // x_hat = (x/mu)/(1+sigma_e^2); d x_hat/dx = 1/(mu (1+sigma_e^2)).
        let xhat = (x.data()[0] / mu) / (1.0 + sigma_e * sigma_e);
        let dxhat_dx = 1.0 / (mu * (1.0 + sigma_e * sigma_e));
        let expected = (y - xhat) / (sigma * sigma) * dxhat_dx;
        assert_relative_eq!(s.data()[0], expected, max_relative = 1e-9);
    }

    #[test]
    fn empty_observations_reduce_to_prior_score() {
        let side = 4;
        let d = unit_prior(side);
        let x = random_grid(side, 3);
        let cfg = GuidanceConfig::default();
        let empty = LikelihoodModel::from_observations(
            &ObservationSet::empty(),
            GridShape::of(&x),
        )
        .unwrap();
        let with_empty = posterior_score(&x, 0.6, &d, Some(&empty), &cfg).unwrap();
        let without = posterior_score(&x, 0.6, &d, None, &cfg).unwrap();
        assert_eq!(with_empty.data(), without.data());
    }

    #[test]
    fn gamma_weakens_guidance_monotonically() {
        let side = 4;
        let d = unit_prior(side);
        let x = random_grid(side, 4);
        let op = ObsOperator::point_set(GridShape::of(&x), &[(0, 0, 0), (0, 3, 2)]).unwrap();
        let lik = LikelihoodModel::new(op, vec![1.0, -0.5], vec![0.01; 2]).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [0.001, 0.002, 0.004, 0.008, 0.016] {
            let cfg = GuidanceConfig {
                gamma,
                ..GuidanceConfig::default()
            };
            let s = likelihood_score(&x, 0.5, &d, &lik, &cfg).unwrap();
            let norm: f64 = s.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < prev, "gamma {gamma}: norm {norm} vs prev {prev}");
            prev = norm;
        }
    }

    #[test]
    fn posterior_score_matches_conjugate_oracle() {
        // With C = I the denoised-state spread at the observed pixels is
        // exactly sigma_s^2, which the Gamma term reproduces at
        // Gamma = mu(tau)^2; the full posterior score then equals the score
        // of the exact Gaussian posterior's VP marginal.
        let side = 8;
        let n = side * side;
        let d = unit_prior(side);
        let x = random_grid(side, 5);
        let vp = VpSchedule::new();
        let obs_points: Vec<(usize, usize, usize)> =
            vec![(0, 1, 1), (0, 2, 6), (0, 5, 3), (0, 7, 7), (0, 4, 0)];
        let op = ObsOperator::point_set(GridShape::of(&x), &obs_points).unwrap();
        let y: Vec<f64> = vec![0.8, -0.3, 1.2, 0.1, -0.9];
        let r = 0.25;
        let lik = LikelihoodModel::new(op.clone(), y.clone(), vec![r; y.len()]).unwrap();

        for &tau in &[0.2, 0.5, 0.8] {
            let mu = vp.mu(tau).unwrap();
            let ss = vp.sigma_s(tau).unwrap();
            let cfg = GuidanceConfig {
                gamma: mu * mu,
                ..GuidanceConfig::default()
            };
            let got = posterior_score(&x, tau, &d, Some(&lik), &cfg).unwrap();

            // Exact posterior: m_post = H^T (I + R)^{-1} y,
            // C_post = I - H^T (I+R)^{-1} H for C = I.
            let m = y.len();
            let hmat = {
                let mut h = DMatrix::zeros(m, n);
                for (k, &i) in op.indices().iter().enumerate() {
                    h[(k, i)] = 1.0;
                }
                h
            };
            let s_mat = &hmat * hmat.transpose() + DMatrix::identity(m, m) * r;
            let s_inv = s_mat.try_inverse().unwrap();
            let m_post = hmat.transpose() * &s_inv * DMatrix::from_column_slice(m, 1, &y);
            let c_post = DMatrix::identity(n, n) - hmat.transpose() * &s_inv * &hmat;
            // VP marginal of the posterior: N(mu*m_post, mu^2 C_post + ss^2 I).
            let marg_cov = &c_post * (mu * mu) + DMatrix::identity(n, n) * (ss * ss);
            let resid = DMatrix::from_column_slice(n, 1, x.data()) - &m_post * mu;
            let expected = -(marg_cov.lu().solve(&resid).unwrap());
            for (g, e) in got.data().iter().zip(expected.iter()) {
                assert!(
                    (g - e).abs() <= 1e-5 * e.abs().max(1.0),
                    "tau {tau}: got {g}, expected {e}"
                );
            }
        }
    }

    #[test]
    fn lmc_zero_corrections_is_identity() {
        let x = random_grid(4, 6);
        let mut rng = member_rng(9, 0);
        let out = lmc_correct(&x, |g| Ok(g.zeros_like()), 0, 0.3, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn lmc_zero_score_skips_step() {
        let x = random_grid(4, 7);
        let mut rng = member_rng(10, 0);
        let out = lmc_correct(&x, |g| Ok(g.zeros_like()), 5, 0.3, &mut rng).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn lmc_step_drift_and_noise_match_formula() {
        // One correction from a fixed state: the update must be
        // delta*s + sqrt(2*delta)*xi with delta = tau_tilde*dim/|s|^2.
        let side = 4;
        let dim = (side * side) as f64;
        let x = random_grid(side, 8);
        let (m_t, v_t) = (0.7, 0.49);
        let score = |g: &FieldGrid| {
            g.with_data(g.data().iter().map(|v| -(v - m_t) / v_t).collect())
        };
        let s0 = score(&x).unwrap();
        let norm2: f64 = s0.data().iter().map(|s| s * s).sum();
        let delta = 0.3 * dim / norm2;

        let n_trials = 20000;
        let mut sum = vec![0.0; x.len()];
        let mut sumsq = vec![0.0; x.len()];
        for trial in 0..n_trials {
            let mut rng = member_rng(1000, trial);
            let out = lmc_correct(&x, &score, 1, 0.3, &mut rng).unwrap();
            for (i, (o, xi)) in out.data().iter().zip(x.data()).enumerate() {
                let d = o - xi;
                sum[i] += d;
                sumsq[i] += d * d;
            }
        }
        for i in 0..x.len() {
            let mean = sum[i] / n_trials as f64;
            let var = sumsq[i] / n_trials as f64 - mean * mean;
            let drift = delta * s0.data()[i];
            // MC error of the mean ~ sqrt(2*delta/n) ~ 0.2% of the noise std.
            assert!(
                (mean - drift).abs() < 4.0 * (2.0 * delta / n_trials as f64).sqrt(),
                "pixel {i}: drift {mean} vs {drift}"
            );
            assert_relative_eq!(var, 2.0 * delta, max_relative = 0.05);
        }
    }

    #[test]
    fn lmc_small_step_samples_gaussian_target() {
        // In the small-step regime the chain's stationary law approaches the
        // target: ULA variance bias is v/(1 - delta/(2v)) with
        // delta ~ tau_tilde * v, ~0.5% at tau_tilde = 0.01.
        let side = 12; // dim = 144
        let (m_t, v_t) = (1.5, 0.49);
        let score = |g: &FieldGrid| {
            g.with_data(g.data().iter().map(|v| -(v - m_t) / v_t).collect())
        };
        let x0 = FieldGrid::new(
            channels(1),
            side,
            side,
            vec![m_t + 1.0; side * side],
            NormStats::unit(1),
        )
        .unwrap();
        let mut rng = member_rng(77, 0);
        let out = lmc_correct(&x0, &score, 4000, 0.01, &mut rng).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!((mean - m_t).abs() < 0.05 * m_t.abs() + 0.1, "mean {mean}");
        assert!((var - v_t).abs() < 0.10 * v_t, "var {var}");
    }

    #[test]
    fn assimilate_deterministic() {
        let d = unit_prior(4);
        let cfg = GuidanceConfig {
            n_steps: 8,
            seed: 42,
            ..GuidanceConfig::default()
        };
        let a = assimilate(&d, None, &cfg).unwrap();
        let b = assimilate(&d, None, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn empty_obs_bitwise_equals_unconditional() {
        let d = unit_prior(4);
        let cfg = GuidanceConfig {
            n_steps: 8,
            seed: 7,
            ..GuidanceConfig::default()
        };
        let empty = LikelihoodModel::from_observations(
            &ObservationSet::empty(),
            GridShape {
                channels: 1,
                height: 4,
                width: 4,
            },
        )
        .unwrap();
        let guided = assimilate(&d, Some(&empty), &cfg).unwrap();
        let uncond = sample_unconditional(&d, &cfg).unwrap();
        assert_eq!(guided.data(), uncond.data());
    }

    #[test]
    fn ensemble_r1_matches_single() {
        let d = unit_prior(4);
        let cfg = GuidanceConfig {
            n_steps: 8,
            seed: 11,
            ..GuidanceConfig::default()
        };
        let e = assimilate_ensemble(&d, None, &cfg, 1).unwrap();
        let single = assimilate(&d, None, &cfg).unwrap();
        assert_eq!(e.members()[0].data(), single.data());
    }

    #[test]
    fn ensemble_failure_lists_failed_members() {
        // A likelihood bound to the wrong grid layout fails every member;
        // the error must carry the (index, stream, reason) list.
        let d = unit_prior(4);
        let wrong_shape = GridShape {
            channels: 1,
            height: 8,
            width: 8,
        };
        let op = ObsOperator::point_set(wrong_shape, &[(0, 0, 0)]).unwrap();
        let lik = LikelihoodModel::new(op, vec![0.5], vec![0.01]).unwrap();
        let cfg = GuidanceConfig {
            n_steps: 8,
            ..GuidanceConfig::default()
        };
        match assimilate_ensemble(&d, Some(&lik), &cfg, 3) {
            Err(SdaError::Ensemble(failures)) => {
                assert_eq!(failures.len(), 3);
                assert_eq!(failures[0].0, 0);
                assert!(failures[0].2.contains("shape"));
            }
            other => panic!("expected ensemble failure, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_members_differ_and_order_is_stable() {
        let d = unit_prior(4);
        let cfg = GuidanceConfig {
            n_steps: 8,
            seed: 13,
            ..GuidanceConfig::default()
        };
        let e1 = assimilate_ensemble(&d, None, &cfg, 4).unwrap();
        let e2 = assimilate_ensemble(&d, None, &cfg, 4).unwrap();
        for (a, b) in e1.members().iter().zip(e2.members()) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(e1.members()[0].data(), e1.members()[1].data());
    }

    #[test]
    fn guided_moves_toward_observations() {
        // One guided reverse pass lands H(x) strictly closer to y (in the
        // V-weighted norm) than the unguided pass from the same seed.
        let side = 16;
        let cov = GridCovariance::single(side, side, 3.0).unwrap();
        let d = GaussianAnalyticDenoiser::zero_mean(channels(1), &cov).unwrap();
        let shape = GridShape {
            channels: 1,
            height: side,
            width: side,
        };
        let mut rng = member_rng(21, 9);
        let points: Vec<(usize, usize, usize)> = (0..10)
            .map(|_| (0, rng.gen_range(0..side), rng.gen_range(0..side)))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let op = ObsOperator::point_set(shape, &points).unwrap();
        let y: Vec<f64> = (0..op.output_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lik = LikelihoodModel::new(op.clone(), y.clone(), vec![0.01; op.output_dim()]).unwrap();
        let cfg = GuidanceConfig {
            n_steps: 32,
            seed: 33,
            ..GuidanceConfig::default()
        };
        let guided = assimilate(&d, Some(&lik), &cfg).unwrap();
        let unguided = assimilate(&d, None, &cfg).unwrap();
        let dist = |g: &FieldGrid| -> f64 {
            op.apply(g)
                .unwrap()
                .iter()
                .zip(&y)
                .map(|(h, yi)| (h - yi) * (h - yi) / 0.01)
                .sum()
        };
        assert!(
            dist(&guided) < dist(&unguided),
            "guided {} vs unguided {}",
            dist(&guided),
            dist(&unguided)
        );
    }

    #[test]
    fn ensemble_std_small_at_observed_pixels() {
        let side = 8;
        let cov = GridCovariance::single(side, side, 2.0).unwrap();
        let d = GaussianAnalyticDenoiser::zero_mean(channels(1), &cov).unwrap();
        let shape = GridShape {
            channels: 1,
            height: side,
            width: side,
        };
        let obs = ObservationSet::new(vec![
            Observation {
                channel: 0,
                row: 2,
                col: 2,
                value: 1.0,
                sigma: 0.05,
            },
            Observation {
                channel: 0,
                row: 5,
                col: 6,
                value: -1.0,
                sigma: 0.05,
            },
        ])
        .unwrap();
        let lik = LikelihoodModel::from_observations(&obs, shape).unwrap();
        let cfg = GuidanceConfig {
            seed: 3,
            ..GuidanceConfig::default()
        };
        let e = assimilate_ensemble(&d, Some(&lik), &cfg, 20).unwrap();
        assert_eq!(e.len(), 20);
        let std = e.std();
        let at_obs = 0.5 * (std.get(0, 2, 2) + std.get(0, 5, 6));
        // Mean std over unobserved pixels, for contrast.
        let mut far = 0.0;
        let mut count = 0;
        for r in 0..side {
            for c in 0..side {
                let d1 = ((r as f64 - 2.0).powi(2) + (c as f64 - 2.0).powi(2)).sqrt();
                let d2 = ((r as f64 - 5.0).powi(2) + (c as f64 - 6.0).powi(2)).sqrt();
                if d1 > 3.0 && d2 > 3.0 {
                    far += std.get(0, r, c);
                    count += 1;
                }
            }
        }
        far /= count as f64;
        assert!(
            at_obs < 0.5 * far,
            "std at observed pixels {at_obs} vs far-field {far}"
        );
    }

    #[test]
    fn edm_sampler_reproduces_prior_variance() {
        // Unit Gaussian prior: samples must come back ~ N(0, 1) per pixel.
        let d = unit_prior(4);
        let schedule = crate::schedule::EdmSchedule::default();
        let mut acc = 0.0;
        let n_samples = 2000;
        for s in 0..n_samples {
            let x = sample_edm(&d, &schedule, s as u64).unwrap();
            acc += x.data().iter().map(|v| v * v).sum::<f64>();
        }
        let var = acc / (n_samples * 16) as f64;
        assert!((var - 1.0).abs() < 0.06, "per-pixel variance {var}");
    }

    #[test]
    fn edm_sampler_deterministic() {
        let d = unit_prior(4);
        let schedule = crate::schedule::EdmSchedule::default();
        let a = sample_edm(&d, &schedule, 5).unwrap();
        let b = sample_edm(&d, &schedule, 5).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_presets() {
        let d = GuidanceConfig::default();
        assert_eq!(
            (d.n_steps, d.corrections, d.tau_tilde, d.sqrt_sigma_y, d.gamma),
            (64, 2, 0.3, 0.1, 0.001)
        );
        let m = GuidanceConfig::missing_channel();
        assert_eq!(
            (m.n_steps, m.corrections, m.tau_tilde, m.sqrt_sigma_y, m.gamma),
            (256, 10, 0.3, 0.1, 0.01)
        );
    }
}
