//! Deterministic and probabilistic verification: MSE/MAE, fair CRPS,
//! ensemble spread, rank histograms, station sweeps, climate diagnostics,
//! and bootstrap confidence intervals.
//!
//! Probabilistic metrics operate on noise-augmented member values
//! y_r = H(x_r) + eta_r (the observation noise model applied to each
//! member); deterministic MSE/MAE use raw member values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};
use crate::field::FieldGrid;
use crate::obs::{GridShape, Observation, ObservationSet};

/// Mean squared error over per-time entry vectors: per time, errors are
/// averaged over entries; the result averages over times.
pub fn mse(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<f64> {
    check_series(pred, obs)?;
    let mut acc = 0.0;
    for (p, o) in pred.iter().zip(obs) {
        let t: f64 = p.iter().zip(o).map(|(a, b)| (b - a) * (b - a)).sum();
        acc += t / p.len() as f64;
    }
    Ok(acc / pred.len() as f64)
}

/// Mean absolute error, same averaging as [`mse`].
pub fn mae(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<f64> {
    check_series(pred, obs)?;
    let mut acc = 0.0;
    for (p, o) in pred.iter().zip(obs) {
        let t: f64 = p.iter().zip(o).map(|(a, b)| (b - a).abs()).sum();
        acc += t / p.len() as f64;
    }
    Ok(acc / pred.len() as f64)
}

/// sqrt(MSE).
pub fn rmse(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<f64> {
    Ok(mse(pred, obs)?.sqrt())
}

fn check_series(pred: &[Vec<f64>], obs: &[Vec<f64>]) -> Result<()> {
    if pred.is_empty() || pred.len() != obs.len() {
        return Err(SdaError::shape(format!(
            "prediction series has {} times, observations {}",
            pred.len(),
            obs.len()
        )));
    }
    for (t, (p, o)) in pred.iter().zip(obs).enumerate() {
        if p.is_empty() || p.len() != o.len() {
            return Err(SdaError::shape(format!(
                "time {t}: {} predictions vs {} observations",
                p.len(),
                o.len()
            )));
        }
    }
    Ok(())
}

/// Fair (unbiased) ensemble CRPS for one verifying value:
///
/// ```text
/// CRPS = (1/R) sum_r |y_r - y|  -  (1/(2R(R-1))) sum_{r != q} |y_r - y_q|
/// ```
///
/// `members` are noise-augmented pseudo-observations.
pub fn crps_fair(members: &[f64], y: f64) -> Result<f64> {
    let r = members.len();
    if r < 2 {
        return Err(SdaError::config(format!(
            "fair CRPS needs at least 2 members, got {r}"
        )));
    }
    let mut first = 0.0;
    for m in members {
        first += (m - y).abs();
    }
    first /= r as f64;
    let mut second = 0.0;
    for (i, a) in members.iter().enumerate() {
        for (j, b) in members.iter().enumerate() {
            if i != j {
                second += (a - b).abs();
            }
        }
    }
    second /= 2.0 * (r * (r - 1)) as f64;
    Ok(first - second)
}

/// Bias-corrected time-averaged ensemble variance:
/// ((R+1)/R) * (1/T) * sum_t s_t^2 with s_t^2 the unbiased per-time variance.
/// Each inner slice holds the R (noise-augmented) member values at one time.
pub fn ensemble_spread(members_per_time: &[Vec<f64>]) -> Result<f64> {
    if members_per_time.is_empty() {
        return Err(SdaError::config("spread needs at least one time".to_string()));
    }
    let r = members_per_time[0].len();
    if r < 2 {
        return Err(SdaError::config(format!(
            "spread needs at least 2 members, got {r}"
        )));
    }
    let mut acc = 0.0;
    for (t, m) in members_per_time.iter().enumerate() {
        if m.len() != r {
            return Err(SdaError::shape(format!(
                "time {t} has {} members, expected {r}",
                m.len()
            )));
        }
        let mean: f64 = m.iter().sum::<f64>() / r as f64;
        let s2: f64 = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
        acc += s2;
    }
    let t = members_per_time.len() as f64;
    Ok((r as f64 + 1.0) / r as f64 * acc / t)
}

/// Rank-histogram counts for ensemble size R: counts[k] is how often the
/// verifying value ranked k-th among the ordered members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    counts: Vec<u64>,
}

impl RankHistogram {
    pub fn new(ensemble_size: usize) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(SdaError::config("ensemble size must be >= 1".to_string()));
        }
        Ok(RankHistogram {
            counts: vec![0; ensemble_size + 1],
        })
    }

    /// Rank one verifying value among (noise-augmented) members; ties are
    /// broken uniformly at random.
    pub fn add(&mut self, members: &[f64], y: f64, rng: &mut impl Rng) -> Result<()> {
        if members.len() + 1 != self.counts.len() {
            return Err(SdaError::shape(format!(
                "histogram built for {} members, got {}",
                self.counts.len() - 1,
                members.len()
            )));
        }
        let below = members.iter().filter(|&&m| m < y).count();
        let equal = members.iter().filter(|&&m| m == y).count();
        let rank = below + if equal > 0 { rng.gen_range(0..=equal) } else { 0 };
        self.counts[rank] += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Chi-square statistic against the uniform distribution.
    pub fn chi_square(&self) -> f64 {
        let total = self.total() as f64;
        let expected = total / self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum()
    }
}

/// Build a rank histogram over many scored points.
pub fn rank_histogram(
    members_per_point: &[Vec<f64>],
    y_per_point: &[f64],
    rng: &mut impl Rng,
) -> Result<RankHistogram> {
    if members_per_point.is_empty() || members_per_point.len() != y_per_point.len() {
        return Err(SdaError::shape("points/values length mismatch".to_string()));
    }
    let mut hist = RankHistogram::new(members_per_point[0].len())?;
    for (m, &y) in members_per_point.iter().zip(y_per_point) {
        hist.add(m, y, rng)?;
    }
    Ok(hist)
}

/// Percentile bootstrap CI for the mean of `values` (resampling times with
/// replacement). Deterministic given the generator state.
pub fn bootstrap_ci(
    values: &[f64],
    iterations: usize,
    level: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(SdaError::config("bootstrap needs at least 2 values".to_string()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(SdaError::config(format!("level must be in (0,1), got {level}")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..iterations.max(1))
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..n {
                acc += values[rng.gen_range(0..n)];
            }
            acc / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| -> f64 {
        let idx = (q * (means.len() - 1) as f64).round() as usize;
        means[idx.min(means.len() - 1)]
    };
    Ok((pick(alpha), pick(1.0 - alpha)))
}

/// One scored point: the R raw member predictions, the verifying value, and
/// the observation noise std used for augmentation.
#[derive(Debug, Clone)]
pub struct ScoredPoint {
    pub channel: usize,
    pub time: usize,
    pub members: Vec<f64>,
    pub obs: f64,
    pub sigma: f64,
}

/// Per-channel verification metrics of an ensemble against observations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    pub mse_mean: f64,
    pub mse_single: f64,
    pub mae_mean: f64,
    pub mae_single: f64,
    pub crps: f64,
    pub var_ens: f64,
    pub rmse_mean: f64,
    /// Per-time RMSE of the ensemble-mean prediction.
    pub rmse_series: Vec<f64>,
    /// 95% bootstrap CI of the mean per-time RMSE.
    pub rmse_ci: (f64, f64),
}

/// Full evaluation report: one [`ChannelMetrics`] per channel plus the rank
/// histograms of the noise-augmented ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub channels: Vec<ChannelMetrics>,
    pub rank_histograms: Vec<RankHistogram>,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Compute all metrics from scored points. `channel_names[c]` labels
    /// channel index c; noise augmentation and rank ties use `seed`.
    pub fn compute(
        points: &[ScoredPoint],
        channel_names: &[String],
        bootstrap_iterations: usize,
        seed: u64,
    ) -> Result<EvalReport> {
        if points.is_empty() {
            return Err(SdaError::config("no scored points".to_string()));
        }
        let r = points[0].members.len();
        if r < 2 {
            return Err(SdaError::config("evaluation needs at least 2 members".to_string()));
        }
        if points.iter().any(|p| p.members.len() != r) {
            return Err(SdaError::shape("inconsistent ensemble size across points".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Augment once; every probabilistic metric sees the same draws.
        let augmented: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                p.members
                    .iter()
                    .map(|m| m + p.sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();

        let mut channels = Vec::with_capacity(channel_names.len());
        let mut rank_histograms = Vec::with_capacity(channel_names.len());
        for (c, name) in channel_names.iter().enumerate() {
            let idx: Vec<usize> = (0..points.len()).filter(|&i| points[i].channel == c).collect();
            if idx.is_empty() {
                return Err(SdaError::config(format!(
                    "channel '{name}' has no scored points"
                )));
            }
            let times: Vec<usize> = {
                let mut t: Vec<usize> = idx.iter().map(|&i| points[i].time).collect();
                t.sort_unstable();
                t.dedup();
                t
            };
            // Group per time for the deterministic metrics.
            let mut pred_mean: Vec<Vec<f64>> = Vec::with_capacity(times.len());
            let mut pred_single: Vec<Vec<f64>> = Vec::with_capacity(times.len());
            let mut obs: Vec<Vec<f64>> = Vec::with_capacity(times.len());
            for &t in &times {
                let mut pm = Vec::new();
                let mut ps = Vec::new();
                let mut ob = Vec::new();
                for &i in &idx {
                    if points[i].time != t {
                        continue;
                    }
                    let p = &points[i];
                    pm.push(p.members.iter().sum::<f64>() / r as f64);
                    ps.push(p.members[0]);
                    ob.push(p.obs);
                }
                pred_mean.push(pm);
                pred_single.push(ps);
                obs.push(ob);
            }
            let mse_mean = mse(&pred_mean, &obs)?;
            let mse_single = mse(&pred_single, &obs)?;
            let mae_mean = mae(&pred_mean, &obs)?;
            let mae_single = mae(&pred_single, &obs)?;
            let rmse_series: Vec<f64> = pred_mean
                .iter()
                .zip(&obs)
                .map(|(p, o)| {
                    let m: f64 =
                        p.iter().zip(o).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / p.len() as f64;
                    m.sqrt()
                })
                .collect();
            let rmse_ci = if rmse_series.len() >= 2 {
                bootstrap_ci(&rmse_series, bootstrap_iterations, 0.95, &mut rng)?
            } else {
                (rmse_series[0], rmse_series[0])
            };

            let crps = {
                let mut acc = 0.0;
                for &i in &idx {
                    acc += crps_fair(&augmented[i], points[i].obs)?;
                }
                acc / idx.len() as f64
            };
            let var_ens = ensemble_spread(
                &idx.iter().map(|&i| augmented[i].clone()).collect::<Vec<_>>(),
            )?;
            let mut hist = RankHistogram::new(r)?;
            for &i in &idx {
                hist.add(&augmented[i], points[i].obs, &mut rng)?;
            }

            channels.push(ChannelMetrics {
                channel: name.clone(),
                mse_mean,
                mse_single,
                mae_mean,
                mae_single,
                crps,
                var_ens,
                rmse_mean: mse_mean.sqrt(),
                rmse_series,
                rmse_ci,
            });
            rank_histograms.push(hist);
        }
        Ok(EvalReport {
            channels,
            rank_histograms,
            ensemble_size: r,
            seed,
        })
    }

    /// CSV body: one row per channel x metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,metric,value\n");
        for c in &self.channels {
            let rows: [(&str, f64); 8] = [
                ("mse_mean", c.mse_mean),
                ("mse_single", c.mse_single),
                ("mae_mean", c.mae_mean),
                ("mae_single", c.mae_single),
                ("crps", c.crps),
                ("var_ens", c.var_ens),
                ("rmse_ci_lo", c.rmse_ci.0),
                ("rmse_ci_hi", c.rmse_ci.1),
            ];
            for (m, v) in rows {
                out.push_str(&format!("{},{},{}\n", c.channel, m, v));
            }
        }
        out
    }
}

/// One row of a station-density sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub guide_count: usize,
    pub eval_count: usize,
    pub per_channel_rmse: Vec<f64>,
    /// Set when the evaluation set is small enough for the RMSE estimate to
    /// be high-variance.
    pub small_eval_set: bool,
}

/// Vary the number of guiding stations: for each count k, guide with the
/// first k stations of a seeded shuffle and score the assimilated state on
/// the held-out stations (noisy pseudo-observations from `truths`).
///
/// `assimilate_fn(obs, time)` produces the state estimate for one time.
pub fn station_sweep<F>(
    stations: &[(usize, usize)],
    counts: &[usize],
    truths: &[FieldGrid],
    noise_std: &[f64],
    split_seed: u64,
    mut assimilate_fn: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&ObservationSet, usize) -> Result<FieldGrid>,
{
    if stations.len() < 2 {
        return Err(SdaError::config("sweep needs at least 2 stations".to_string()));
    }
    if truths.is_empty() {
        return Err(SdaError::config("sweep needs at least one truth grid".to_string()));
    }
    let n_channels = truths[0].channel_count();
    if noise_std.len() != n_channels {
        return Err(SdaError::shape(format!(
            "{} noise entries for {} channels",
            noise_std.len(),
            n_channels
        )));
    }
    for &k in counts {
        if k == 0 || k >= stations.len() {
            return Err(SdaError::config(format!(
                "guide count {k} must be in [1, {})",
                stations.len()
            )));
        }
    }
    // One fixed shuffle governs every count so splits are nested.
    let mut order: Vec<usize> = (0..stations.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(split_seed);
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut obs_rng = ChaCha8Rng::seed_from_u64(split_seed ^ 0x0b5e_77a7);
    // Draw per-(time, station, channel) observation noise once; guide and
    // eval values stay consistent across counts.
    let noise: Vec<Vec<Vec<f64>>> = truths
        .iter()
        .map(|_| {
            stations
                .iter()
                .map(|_| {
                    (0..n_channels)
                        .map(|c| noise_std[c] * obs_rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(counts.len());
    for &k in counts {
        let guide = &order[..k];
        let eval = &order[k..];
        let mut sq_err = vec![0.0; n_channels];
        let mut n_scored = vec![0usize; n_channels];
        for (t, truth) in truths.iter().enumerate() {
            let mut observations = Vec::with_capacity(k * n_channels);
            for &s in guide {
                let (row, col) = stations[s];
                for c in 0..n_channels {
                    observations.push(Observation {
                        channel: c,
                        row,
                        col,
                        value: truth.get(c, row, col) + noise[t][s][c],
                        sigma: noise_std[c],
                    });
                }
            }
            let obs = ObservationSet::new(observations)?;
            let state = assimilate_fn(&obs, t)?;
            for &s in eval {
                let (row, col) = stations[s];
                for c in 0..n_channels {
                    let y = truth.get(c, row, col) + noise[t][s][c];
                    let d = state.get(c, row, col) - y;
                    sq_err[c] += d * d;
                    n_scored[c] += 1;
                }
            }
        }
        let per_channel_rmse: Vec<f64> = sq_err
            .iter()
            .zip(&n_scored)
            .map(|(s, &n)| (s / n as f64).sqrt())
            .collect();
        rows.push(SweepRow {
            guide_count: k,
            eval_count: eval.len(),
            per_channel_rmse,
            small_eval_set: eval.len() < 5,
        });
    }
    Ok(rows)
}

/// Shared-bin histogram of one channel's values in two sample sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelHistogram {
    pub channel: String,
    pub bin_edges: Vec<f64>,
    pub counts_a: Vec<u64>,
    pub counts_b: Vec<u64>,
}

/// Climate comparison of two sample sets (e.g. unconditional generations vs
/// training data).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClimateReport {
    pub channels: Vec<String>,
    /// Per-channel time-mean maps (H*W each) of set A and set B.
    pub mean_maps_a: Vec<Vec<f64>>,
    pub mean_maps_b: Vec<Vec<f64>>,
    pub histograms: Vec<ChannelHistogram>,
    /// mean(A) - mean(B) per channel.
    pub mean_bias: Vec<f64>,
    /// var(A)/var(B) per channel.
    pub variance_ratio: Vec<f64>,
}

/// Time-mean maps, shared-bin value histograms, and bias/variance summaries
/// between two sets of shape-identical grids.
pub fn climate_diagnostics(
    set_a: &[FieldGrid],
    set_b: &[FieldGrid],
    n_bins: usize,
) -> Result<ClimateReport> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(SdaError::config("both sample sets must be non-empty".to_string()));
    }
    let proto = &set_a[0];
    for g in set_a.iter().chain(set_b) {
        if !g.same_layout(proto) {
            return Err(SdaError::shape("sample sets differ in grid layout".to_string()));
        }
    }
    if n_bins < 2 {
        return Err(SdaError::config("need at least 2 histogram bins".to_string()));
    }
    let shape = GridShape::of(proto);
    let hw = shape.height * shape.width;
    let names: Vec<String> = proto.channels().iter().map(|c| c.name.clone()).collect();

    let mean_map = |set: &[FieldGrid], c: usize| -> Vec<f64> {
        let mut acc = vec![0.0; hw];
        for g in set {
            for (a, v) in acc.iter_mut().zip(g.channel_data(c)) {
                *a += v;
            }
        }
        let inv = 1.0 / set.len() as f64;
        acc.iter().map(|a| a * inv).collect()
    };

    let mut mean_maps_a = Vec::new();
    let mut mean_maps_b = Vec::new();
    let mut histograms = Vec::new();
    let mut mean_bias = Vec::new();
    let mut variance_ratio = Vec::new();
    for c in 0..shape.channels {
        mean_maps_a.push(mean_map(set_a, c));
        mean_maps_b.push(mean_map(set_b, c));

        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in set_a.iter().chain(set_b) {
            for &v in g.channel_data(c) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo == hi {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
        let count = |set: &[FieldGrid]| -> Vec<u64> {
            let mut counts = vec![0u64; n_bins];
            for g in set {
                for &v in g.channel_data(c) {
                    let bin = (((v - lo) / width) as usize).min(n_bins - 1);
                    counts[bin] += 1;
                }
            }
            counts
        };
        histograms.push(ChannelHistogram {
            channel: names[c].clone(),
            bin_edges: edges,
            counts_a: count(set_a),
            counts_b: count(set_b),
        });

        let stats = |set: &[FieldGrid]| -> (f64, f64) {
            let n = (set.len() * hw) as f64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for g in set {
                for &v in g.channel_data(c) {
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / n;
            (mean, sumsq / n - mean * mean)
        };
        let (ma, va) = stats(set_a);
        let (mb, vb) = stats(set_b);
        mean_bias.push(ma - mb);
        variance_ratio.push(if vb > 0.0 { va / vb } else { f64::NAN });
    }
    Ok(ClimateReport {
        channels: names,
        mean_maps_a,
        mean_maps_b,
        histograms,
        mean_bias,
        variance_ratio,
    })
}
