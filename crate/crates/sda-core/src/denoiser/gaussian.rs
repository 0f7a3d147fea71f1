//! Exact Gaussian conditioning backend and the grid covariance models it
//! shares with the synthetic dataset generator and the verification oracles.
//!
//! For a prior x ~ N(m, C) and noisy input x + sigma*eps, the posterior mean
//! is m + C (C + sigma^2 I)^{-1} (x - m). The covariance is stored through
//! its symmetric eigendecomposition so every noise level costs two dense
//! matrix-vector products.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::Denoiser;
use crate::error::{Result, SdaError};
use crate::field::{ChannelSpec, FieldGrid, NormStats};

/// Stationary squared-exponential kernel for one channel, unit variance,
/// with an explicit diagonal nugget that is part of the covariance
/// definition (shared exactly by sampler, denoiser, and oracles).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelKernel {
    pub length_scale: f64,
    pub nugget: f64,
}

impl ChannelKernel {
    pub fn new(length_scale: f64) -> Result<Self> {
        Self::with_nugget(length_scale, 1e-6)
    }

    pub fn with_nugget(length_scale: f64, nugget: f64) -> Result<Self> {
        if !(length_scale > 0.0) {
            return Err(SdaError::config(format!(
                "kernel length scale must be > 0, got {length_scale}"
            )));
        }
        if !(nugget >= 0.0) {
            return Err(SdaError::config(format!("nugget must be >= 0, got {nugget}")));
        }
        Ok(ChannelKernel { length_scale, nugget })
    }

    /// Dense H*W x H*W kernel matrix on a regular grid.
    pub fn dense(&self, height: usize, width: usize) -> DMatrix<f64> {
        let n = height * width;
        let inv = 1.0 / (2.0 * self.length_scale * self.length_scale);
        let mut k = DMatrix::zeros(n, n);
        for a in 0..n {
            let (ra, ca) = ((a / width) as f64, (a % width) as f64);
            for b in a..n {
                let (rb, cb) = ((b / width) as f64, (b % width) as f64);
                let d2 = (ra - rb).powi(2) + (ca - cb).powi(2);
                let v = (-d2 * inv).exp();
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        for i in 0..n {
            k[(i, i)] += self.nugget;
        }
        k
    }
}

/// Covariance over a flattened C x H x W grid built from per-channel
/// squared-exponential kernels mixed by a cross-channel correlation matrix.
///
/// Channel c of a sample is sum_j A[c][j] z_j with A = chol(corr) and z_j a
/// zero-mean field with kernel S_j, so the dense covariance is
/// sum_j (col_j(A) col_j(A)^T) (x) S_j.
#[derive(Debug, Clone)]
pub struct GridCovariance {
    height: usize,
    width: usize,
    kernels: Vec<ChannelKernel>,
    corr: DMatrix<f64>,
    mix: DMatrix<f64>,
}

impl GridCovariance {
    pub fn new(
        height: usize,
        width: usize,
        kernels: Vec<ChannelKernel>,
        channel_corr: DMatrix<f64>,
    ) -> Result<Self> {
        if kernels.is_empty() || height == 0 || width == 0 {
            return Err(SdaError::config("covariance dimensions must be positive".to_string()));
        }
        let c = kernels.len();
        if channel_corr.nrows() != c || channel_corr.ncols() != c {
            return Err(SdaError::shape(format!(
                "correlation matrix is {}x{}, expected {c}x{c}",
                channel_corr.nrows(),
                channel_corr.ncols()
            )));
        }
        for i in 0..c {
            if (channel_corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(SdaError::config(
                    "correlation matrix must have unit diagonal".to_string(),
                ));
            }
            for j in 0..c {
                if (channel_corr[(i, j)] - channel_corr[(j, i)]).abs() > 1e-12 {
                    return Err(SdaError::config("correlation matrix must be symmetric".to_string()));
                }
            }
        }
        let mix = channel_corr
            .clone()
            .cholesky()
            .ok_or_else(|| SdaError::config("correlation matrix is not positive definite".to_string()))?
            .l();
        Ok(GridCovariance {
            height,
            width,
            kernels,
            corr: channel_corr,
            mix,
        })
    }

    /// Single-channel covariance with the default nugget.
    pub fn single(height: usize, width: usize, length_scale: f64) -> Result<Self> {
        GridCovariance::new(
            height,
            width,
            vec![ChannelKernel::new(length_scale)?],
            DMatrix::identity(1, 1),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channel_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernels(&self) -> &[ChannelKernel] {
        &self.kernels
    }

    pub fn channel_corr(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// Dense covariance over the flattened grid, channel-major.
    pub fn dense(&self) -> DMatrix<f64> {
        let c = self.kernels.len();
        let hw = self.height * self.width;
        let n = c * hw;
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..c {
            let s = self.kernels[j].dense(self.height, self.width);
            for ca in 0..c {
                let w_a = self.mix[(ca, j)];
                if w_a == 0.0 {
                    continue;
                }
                for cb in 0..c {
                    let w = w_a * self.mix[(cb, j)];
                    if w == 0.0 {
                        continue;
                    }
                    for p in 0..hw {
                        for q in 0..hw {
                            cov[(ca * hw + p, cb * hw + q)] += w * s[(p, q)];
                        }
                    }
                }
            }
        }
        cov
    }

    /// Cholesky-based sampler drawing fields with exactly this covariance.
    pub fn sampler(&self) -> Result<GrfSampler> {
        let mut l_spatial = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let dense = k.dense(self.height, self.width);
            let chol = dense.cholesky().ok_or_else(|| {
                SdaError::numerical(format!(
                    "spatial kernel (ell = {}) is not positive definite; increase the nugget",
                    k.length_scale
                ))
            })?;
            l_spatial.push(chol.l());
        }
        Ok(GrfSampler {
            height: self.height,
            width: self.width,
            l_spatial,
            mix: self.mix.clone(),
        })
    }
}

/// Draws stationary Gaussian random fields matching a [`GridCovariance`].
pub struct GrfSampler {
    height: usize,
    width: usize,
    l_spatial: Vec<DMatrix<f64>>,
    mix: DMatrix<f64>,
}

impl GrfSampler {
    /// One flat C*H*W sample, channel-major.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let c = self.l_spatial.len();
        let hw = self.height * self.width;
        let z: Vec<DVector<f64>> = (0..c)
            .map(|j| {
                let xi = DVector::from_fn(hw, |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.l_spatial[j] * xi
            })
            .collect();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for j in 0..c {
                let w = self.mix[(ch, j)];
                if w == 0.0 {
                    continue;
                }
                for p in 0..hw {
                    out[ch * hw + p] += w * z[j][p];
                }
            }
        }
        out
    }
}

/// Exact Gaussian conditioning denoiser: D(x; sigma) = m + C(C + sigma^2 I)^{-1}(x - m).
pub struct GaussianAnalyticDenoiser {
    mean: FieldGrid,
    eig_vecs: DMatrix<f64>,
    eig_vals: DVector<f64>,
}

impl GaussianAnalyticDenoiser {
    /// Build from a dense symmetric positive-definite covariance over the
    /// flattened grid (channel-major, matching `mean`).
    pub fn from_covariance(mean: FieldGrid, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(SdaError::shape(format!(
                "covariance is {}x{}, grid has {} entries",
                covariance.nrows(),
                covariance.ncols(),
                n
            )));
        }
        let scale = covariance.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 * scale {
                    return Err(SdaError::config("covariance must be symmetric".to_string()));
                }
            }
        }
        let eig = covariance.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(SdaError::config(
                "covariance must be positive definite (non-positive eigenvalue found)".to_string(),
            ));
        }
        Ok(GaussianAnalyticDenoiser {
            mean,
            eig_vecs: eig.eigenvectors,
            eig_vals: eig.eigenvalues,
        })
    }

    /// Build from a structured grid covariance, with the given mean.
    pub fn from_grid_covariance(mean: FieldGrid, cov: &GridCovariance) -> Result<Self> {
        if mean.channel_count() != cov.channel_count()
            || mean.height() != cov.height()
            || mean.width() != cov.width()
        {
            return Err(SdaError::shape(
                "mean grid layout does not match covariance layout".to_string(),
            ));
        }
        Self::from_covariance(mean, cov.dense())
    }

    /// Zero-mean convenience constructor.
    pub fn zero_mean(
        channels: Vec<ChannelSpec>,
        cov: &GridCovariance,
    ) -> Result<Self> {
        let mean = FieldGrid::zeros(channels, cov.height(), cov.width(), NormStats::unit(cov.channel_count()))?;
        Self::from_grid_covariance(mean, cov)
    }

    pub fn mean(&self) -> &FieldGrid {
        &self.mean
    }

    /// Largest covariance eigenvalue (handy for conditioning diagnostics).
    pub fn max_eigenvalue(&self) -> f64 {
        self.eig_vals.iter().cloned().fold(0.0, f64::max)
    }

    /// Q f(L) Q^T v with f(l) = l/(l + sigma^2).
    fn shrink(&self, v: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let vv = DVector::from_column_slice(v);
        let mut proj = self.eig_vecs.transpose() * vv;
        for (p, l) in proj.iter_mut().zip(self.eig_vals.iter()) {
            *p *= l / (l + s2);
        }
        (&self.eig_vecs * proj).data.into()
    }
}

impl Denoiser for GaussianAnalyticDenoiser {
    fn evaluate(&self, x: &FieldGrid, sigma: f64) -> Result<FieldGrid> {
        if sigma < 0.0 {
            return Err(SdaError::domain(format!("sigma must be >= 0, got {sigma}")));
        }
        if !x.same_layout(&self.mean) {
            return Err(SdaError::shape("grid layout does not match denoiser".to_string()));
        }
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let centered: Vec<f64> = x.data().iter().zip(self.mean.data()).map(|(a, m)| a - m).collect();
        let shrunk = self.shrink(&centered, sigma);
        x.with_data(
            shrunk
                .iter()
                .zip(self.mean.data())
                .map(|(s, m)| s + m)
                .collect(),
        )
    }

    fn vjp(&self, x: &FieldGrid, sigma: f64, cotangent: &FieldGrid) -> Result<FieldGrid> {
        if sigma < 0.0 {
            return Err(SdaError::domain(format!("sigma must be >= 0, got {sigma}")));
        }
        if !x.same_layout(&self.mean) || !cotangent.same_layout(&self.mean) {
            return Err(SdaError::shape("grid layout does not match denoiser".to_string()));
        }
        if sigma == 0.0 {
            return Ok(cotangent.clone());
        }
        // The Jacobian C(C + sigma^2 I)^{-1} is symmetric.
        cotangent.with_data(self.shrink(cotangent.data(), sigma))
    }

    fn channels(&self) -> &[ChannelSpec] {
        self.mean.channels()
    }

    fn height(&self) -> usize {
        self.mean.height()
    }

    fn width(&self) -> usize {
        self.mean.width()
    }

    fn norm(&self) -> &NormStats {
        self.mean.norm()
    }
}
