//! Per-command run configuration: TOML file values overridden by CLI flags,
//! with unknown keys rejected and the resolved result written next to the
//! outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sda_core::guidance::GuidanceConfig;

pub fn load_config_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config file {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

/// Write the fully resolved configuration next to the run outputs.
pub fn write_resolved<T: Serialize>(out_dir: &Path, resolved: &T) -> Result<PathBuf> {
    let path = out_dir.join("resolved-config.toml");
    let text = toml::to_string_pretty(resolved).context("config serialization failed")?;
    std::fs::write(&path, text)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Guidance keys shared by the sampling commands.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceKeys {
    pub preset: Option<String>,
    pub n_steps: Option<usize>,
    pub corrections: Option<usize>,
    pub tau_tilde: Option<f64>,
    pub gamma: Option<f64>,
    pub sqrt_sigma_y: Option<f64>,
}

impl GuidanceKeys {
    /// Apply preset, then individual overrides, on top of `flags` (which
    /// take precedence over file values).
    pub fn resolve(&self, flags: &GuidanceKeys, seed: u64) -> Result<GuidanceConfig> {
        let preset = flags.preset.as_ref().or(self.preset.as_ref());
        let mut cfg = match preset.map(String::as_str) {
            None | Some("default") => GuidanceConfig::default(),
            Some("missing-channel") => GuidanceConfig::missing_channel(),
            Some(other) => bail!("unknown preset '{other}' (expected 'default' or 'missing-channel')"),
        };
        let pick = |flag: Option<usize>, file: Option<usize>, d: usize| flag.or(file).unwrap_or(d);
        let pickf = |flag: Option<f64>, file: Option<f64>, d: f64| flag.or(file).unwrap_or(d);
        cfg.n_steps = pick(flags.n_steps, self.n_steps, cfg.n_steps);
        cfg.corrections = pick(flags.corrections, self.corrections, cfg.corrections);
        cfg.tau_tilde = pickf(flags.tau_tilde, self.tau_tilde, cfg.tau_tilde);
        cfg.gamma = pickf(flags.gamma, self.gamma, cfg.gamma);
        cfg.sqrt_sigma_y = pickf(flags.sqrt_sigma_y, self.sqrt_sigma_y, cfg.sqrt_sigma_y);
        cfg.seed = seed;
        Ok(cfg)
    }
}

/// gen-data keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub height: usize,
    pub width: usize,
    pub channel_names: Vec<String>,
    pub length_scales: Vec<f64>,
    pub nugget: f64,
    /// Row-major correlation matrix; identity when omitted.
    pub channel_corr: Option<Vec<Vec<f64>>>,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            height: 32,
            width: 32,
            channel_names: vec!["ch0".to_string()],
            length_scales: vec![3.0],
            nugget: 1e-6,
            channel_corr: None,
            sample_count: 1000,
            seed: 0,
        }
    }
}

/// train keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCliConfig {
    pub data_manifest: Option<PathBuf>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub validation_fraction: f64,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        TrainCliConfig {
            data_manifest: None,
            iterations: 3000,
            batch_size: 16,
            learning_rate: 2e-3,
            p_mean: -1.2,
            p_std: 1.2,
            validation_fraction: 0.05,
            base_width: 16,
            seed: 0,
        }
    }
}

/// sample keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub prior: Option<PathBuf>,
    pub members: usize,
    pub schedule: String,
    pub seed: u64,
    /// Additionally export members and mean in physical units.
    pub physical: bool,
    #[serde(flatten)]
    pub guidance: GuidanceKeys,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            prior: None,
            members: 1,
            schedule: "vp".to_string(),
            seed: 0,
            physical: false,
            guidance: GuidanceKeys::default(),
        }
    }
}

/// assimilate keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssimilateConfig {
    pub prior: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub members: usize,
    pub seed: u64,
    /// Additionally export members and mean in physical units.
    pub physical: bool,
    #[serde(flatten)]
    pub guidance: GuidanceKeys,
}

impl Default for AssimilateConfig {
    fn default() -> Self {
        AssimilateConfig {
            prior: None,
            observations: None,
            members: 15,
            seed: 0,
            physical: false,
            guidance: GuidanceKeys::default(),
        }
    }
}

/// evaluate keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub ensemble_dir: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub bootstrap_iterations: usize,
    pub seed: u64,
    pub default_sigma: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            ensemble_dir: None,
            observations: None,
            bootstrap_iterations: 1000,
            seed: 0,
            default_sigma: 0.1,
        }
    }
}

/// station-sweep keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub data_manifest: Option<PathBuf>,
    /// Checkpoint path; the analytic prior from the manifest when omitted.
    pub prior: Option<PathBuf>,
    pub n_stations: usize,
    pub counts: Vec<usize>,
    pub n_times: usize,
    pub split_seed: u64,
    pub seed: u64,
    #[serde(flatten)]
    pub guidance: GuidanceKeys,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            data_manifest: None,
            prior: None,
            n_stations: 50,
            counts: vec![10, 25, 40],
            n_times: 8,
            split_seed: 0,
            seed: 0,
            guidance: GuidanceKeys::default(),
        }
    }
}

/// oracle-check keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Ensemble size of the posterior benchmark (acceptance uses 256).
    pub members: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { members: 256 }
    }
}
