//! Batch command-line driver: dataset synthesis, denoiser training,
//! unconditional sampling, observation-guided assimilation, ensemble
//! evaluation, station sweeps, and the linear-Gaussian verification suite.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O or parse error.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sda_core::denoiser::{ConvDenoiser, Denoiser, GaussianAnalyticDenoiser, TrainConfig};
use sda_core::field::{FieldGrid, NormStats};
use sda_core::guidance::{
    assimilate_ensemble, sample_edm, GuidanceConfig, LikelihoodModel,
};
use sda_core::io::{
    covariance_from_spec, read_checkpoint, read_dataset, read_grid_file, read_observation_csv,
    write_checkpoint, write_grf_dataset, write_grid_file, SyntheticDatasetSpec,
};
use sda_core::metrics::{station_sweep, EvalReport, ScoredPoint};
use sda_core::obs::GridShape;
use sda_core::oracle;
use sda_core::schedule::EdmSchedule;
use sda_core::SdaError;

use config::*;
use output::{sanitize_time_key, RasterWriter, RunManifest};

#[derive(Parser)]
#[command(name = "sda", about = "Score-based data assimilation toolkit", version)]
struct Cli {
    /// TOML config file with command-specific keys; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "sda-out")]
    out_dir: PathBuf,

    /// Base random seed (the SDA_SEED environment variable overrides this).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bound on worker threads for ensemble members and training batches.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GuidanceFlags {
    /// Hyperparameter preset: "default" or "missing-channel".
    #[arg(long)]
    preset: Option<String>,
    /// Diffusion steps N.
    #[arg(long)]
    n_steps: Option<usize>,
    /// Langevin corrections per step C.
    #[arg(long)]
    corrections: Option<usize>,
    /// Langevin step-size parameter.
    #[arg(long)]
    tau_tilde: Option<f64>,
    /// Likelihood variance inflation.
    #[arg(long)]
    gamma: Option<f64>,
    /// Default observation noise std (normalized units).
    #[arg(long)]
    sqrt_sigma_y: Option<f64>,
}

impl GuidanceFlags {
    fn keys(&self) -> GuidanceKeys {
        GuidanceKeys {
            preset: self.preset.clone(),
            n_steps: self.n_steps,
            corrections: self.corrections,
            tau_tilde: self.tau_tilde,
            gamma: self.gamma,
            sqrt_sigma_y: self.sqrt_sigma_y,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-random-field dataset with a manifest.
    GenData {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        sample_count: Option<usize>,
        /// Comma-separated per-channel length scales.
        #[arg(long, value_delimiter = ',')]
        length_scales: Option<Vec<f64>>,
        /// Comma-separated channel names.
        #[arg(long, value_delimiter = ',')]
        channel_names: Option<Vec<String>>,
        /// Uniform off-diagonal cross-channel correlation.
        #[arg(long)]
        cross_correlation: Option<f64>,
    },
    /// Train the convolutional denoiser on a generated dataset.
    Train {
        /// Path to the dataset manifest.json.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        base_width: Option<usize>,
    },
    /// Draw unconditional samples from a prior.
    Sample {
        /// Prior: a .sdad checkpoint or a dataset manifest.json (analytic).
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        members: Option<usize>,
        /// "vp" (default) or "edm".
        #[arg(long)]
        schedule: Option<String>,
        /// Additionally export members and mean in physical units.
        #[arg(long)]
        physical: bool,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Assimilate an observation CSV into an ensemble of states.
    Assimilate {
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Observation CSV (time,station_id,row,col,channel,value[,sigma]).
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        members: Option<usize>,
        /// Additionally export members and mean in physical units.
        #[arg(long)]
        physical: bool,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Score an assimilated ensemble against held-out observations.
    Evaluate {
        /// Directory produced by `assimilate`.
        #[arg(long)]
        ensemble_dir: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        bootstrap_iterations: Option<usize>,
    },
    /// Held-out-station RMSE as a function of guiding-station count.
    StationSweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        n_stations: Option<usize>,
        /// Comma-separated station counts to sweep.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        n_times: Option<usize>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[command(flatten)]
        guidance: GuidanceFlags,
    },
    /// Run the linear-Gaussian verification suite and print PASS/FAIL lines.
    OracleCheck {
        /// Ensemble size for the posterior benchmark (acceptance uses 256).
        #[arg(long)]
        members: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &anyhow::Error) -> u8 {
    if let Some(sda) = e.downcast_ref::<SdaError>() {
        return match sda {
            SdaError::Config(_) | SdaError::Domain(_) | SdaError::Shape(_) => 2,
            SdaError::Numerical(_) | SdaError::Ensemble(_) => 3,
            SdaError::Io(_) | SdaError::Parse { .. } | SdaError::Format(_) => 4,
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 4;
    }
    // Config-file and argument problems.
    2
}

fn effective_seed(flag: Option<u64>, file_seed: u64) -> Result<u64> {
    if let Ok(v) = std::env::var("SDA_SEED") {
        return v
            .parse::<u64>()
            .map_err(|e| anyhow!("SDA_SEED must be an unsigned integer: {e}"));
    }
    Ok(flag.unwrap_or(file_seed))
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(())
}

/// Load a prior backend: .sdad checkpoint or dataset manifest (analytic,
/// zero mean, covariance from the recorded kernel parameters).
fn load_prior(path: &Path) -> Result<Box<dyn Denoiser>> {
    let name = path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default();
    if name.ends_with(".sdad") {
        let model = read_checkpoint(path)?;
        return Ok(Box::new(model));
    }
    if name.ends_with(".json") {
        let (manifest, _) = read_dataset_manifest_only(path)?;
        let cov = covariance_from_spec(&manifest.spec)?;
        let denoiser = GaussianAnalyticDenoiser::zero_mean(manifest.spec.channels(), &cov)?;
        return Ok(Box::new(denoiser));
    }
    bail!(
        "prior {} must be a .sdad checkpoint or a dataset manifest.json",
        path.display()
    )
}

fn read_dataset_manifest_only(path: &Path) -> Result<(sda_core::io::DatasetManifest, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: sda_core::io::DatasetManifest =
        serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))?;
    let dir = path
        .parent()
        .ok_or_else(|| anyhow!("manifest has no parent directory"))?;
    Ok((manifest, dir.to_path_buf()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("thread pool already initialized")?;
    }
    let out_dir = cli.out_dir.clone();
    match cli.command {
        Command::GenData {
            height,
            width,
            sample_count,
            length_scales,
            channel_names,
            cross_correlation,
        } => {
            let file: GenDataConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if let Some(h) = height {
                resolved.height = h;
            }
            if let Some(w) = width {
                resolved.width = w;
            }
            if let Some(n) = sample_count {
                resolved.sample_count = n;
            }
            if let Some(l) = length_scales {
                resolved.length_scales = l;
            }
            if let Some(c) = channel_names {
                resolved.channel_names = c;
            }
            if let Some(rho) = cross_correlation {
                let c = resolved.channel_names.len();
                resolved.channel_corr = Some(
                    (0..c)
                        .map(|i| (0..c).map(|j| if i == j { 1.0 } else { rho }).collect())
                        .collect(),
                );
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            cmd_gen_data(&out_dir, resolved)
        }
        Command::Train {
            data,
            iterations,
            batch_size,
            learning_rate,
            base_width,
        } => {
            let file: TrainCliConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if data.is_some() {
                resolved.data_manifest = data;
            }
            if let Some(v) = iterations {
                resolved.iterations = v;
            }
            if let Some(v) = batch_size {
                resolved.batch_size = v;
            }
            if let Some(v) = learning_rate {
                resolved.learning_rate = v;
            }
            if let Some(v) = base_width {
                resolved.base_width = v;
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            cmd_train(&out_dir, resolved)
        }
        Command::Sample {
            prior,
            members,
            schedule,
            physical,
            guidance,
        } => {
            let file: SampleConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if prior.is_some() {
                resolved.prior = prior;
            }
            if let Some(m) = members {
                resolved.members = m;
            }
            if let Some(s) = schedule {
                resolved.schedule = s;
            }
            if physical {
                resolved.physical = true;
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            let flags = guidance.keys();
            cmd_sample(&out_dir, resolved, flags)
        }
        Command::Assimilate {
            prior,
            observations,
            members,
            physical,
            guidance,
        } => {
            let file: AssimilateConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if prior.is_some() {
                resolved.prior = prior;
            }
            if observations.is_some() {
                resolved.observations = observations;
            }
            if let Some(m) = members {
                resolved.members = m;
            }
            if physical {
                resolved.physical = true;
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            let flags = guidance.keys();
            cmd_assimilate(&out_dir, resolved, flags)
        }
        Command::Evaluate {
            ensemble_dir,
            observations,
            bootstrap_iterations,
        } => {
            let file: EvaluateConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if ensemble_dir.is_some() {
                resolved.ensemble_dir = ensemble_dir;
            }
            if observations.is_some() {
                resolved.observations = observations;
            }
            if let Some(b) = bootstrap_iterations {
                resolved.bootstrap_iterations = b;
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            cmd_evaluate(&out_dir, resolved)
        }
        Command::StationSweep {
            data,
            prior,
            n_stations,
            counts,
            n_times,
            split_seed,
            guidance,
        } => {
            let file: SweepConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if data.is_some() {
                resolved.data_manifest = data;
            }
            if prior.is_some() {
                resolved.prior = prior;
            }
            if let Some(v) = n_stations {
                resolved.n_stations = v;
            }
            if let Some(v) = counts {
                resolved.counts = v;
            }
            if let Some(v) = n_times {
                resolved.n_times = v;
            }
            if let Some(v) = split_seed {
                resolved.split_seed = v;
            }
            resolved.seed = effective_seed(cli.seed, resolved.seed)?;
            let flags = guidance.keys();
            cmd_station_sweep(&out_dir, resolved, flags)
        }
        Command::OracleCheck { members } => {
            let file: OracleConfig = load_config_file(cli.config.as_deref())?;
            let mut resolved = file;
            if let Some(m) = members {
                resolved.members = m;
            }
            cmd_oracle_check(&out_dir, resolved)
        }
    }
}

fn cmd_gen_data(out_dir: &Path, cfg: GenDataConfig) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let c = cfg.channel_names.len();
    let corr = cfg.channel_corr.clone().unwrap_or_else(|| {
        (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    });
    let spec = SyntheticDatasetSpec {
        height: cfg.height,
        width: cfg.width,
        channel_names: cfg.channel_names.clone(),
        length_scales: cfg.length_scales.clone(),
        nugget: cfg.nugget,
        channel_corr: corr,
        sample_count: cfg.sample_count,
        seed: cfg.seed,
    };
    let manifest = write_grf_dataset(&spec, out_dir)?;
    let mut run_manifest = RunManifest::new("gen-data");
    for f in &manifest.files {
        run_manifest.files.push(f.clone());
    }
    run_manifest.files.push("manifest.json".to_string());
    write_resolved(out_dir, &cfg)?;
    run_manifest.files.push("resolved-config.toml".to_string());
    run_manifest.write(out_dir)?;
    println!(
        "wrote {} samples ({}x{}, {} channel(s)) to {}",
        manifest.files.len(),
        spec.height,
        spec.width,
        c,
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(out_dir: &Path, cfg: TrainCliConfig) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let manifest_path = cfg
        .data_manifest
        .clone()
        .ok_or_else(|| anyhow!("train requires a dataset manifest (--data)"))?;
    let (manifest, grids) = read_dataset(&manifest_path)?;
    if grids.is_empty() {
        bail!("dataset is empty");
    }
    // Normalization stats from the training split, stored in the checkpoint.
    let n_val = ((grids.len() as f64 * cfg.validation_fraction).round() as usize)
        .clamp(1, grids.len() - 1);
    let n_train = grids.len() - n_val;
    let hw = grids[0].height() * grids[0].width();
    let n_channels = grids[0].channel_count();
    let mut mean = vec![0.0; n_channels];
    let mut var = vec![0.0; n_channels];
    for g in &grids[..n_train] {
        for ch in 0..n_channels {
            for &v in g.channel_data(ch) {
                mean[ch] += v;
            }
        }
    }
    let count = (n_train * hw) as f64;
    for m in &mut mean {
        *m /= count;
    }
    for g in &grids[..n_train] {
        for ch in 0..n_channels {
            for &v in g.channel_data(ch) {
                var[ch] += (v - mean[ch]) * (v - mean[ch]);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
    let stats = NormStats::new(mean, std).map_err(anyhow::Error::from)?;
    let normalized: Vec<FieldGrid> = grids
        .iter()
        .map(|g| sda_core::field::normalize(g, &stats))
        .collect::<sda_core::Result<_>>()?;

    let model = ConvDenoiser::new(
        manifest.spec.channels(),
        stats,
        grids[0].height(),
        grids[0].width(),
        cfg.base_width,
        cfg.seed,
    )?;
    println!(
        "training {} parameters on {} samples ({} held out) for {} iterations",
        model.param_count(),
        n_train,
        n_val,
        cfg.iterations
    );
    let train_config = TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        iterations: cfg.iterations,
        p_mean: cfg.p_mean,
        p_std: cfg.p_std,
        validation_fraction: cfg.validation_fraction,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let (trained, log) = sda_core::denoiser::train(model, &normalized, train_config)?;

    let mut manifest_out = RunManifest::new("train");
    let ckpt = out_dir.join("model.sdad");
    write_checkpoint(&ckpt, &trained)?;
    manifest_out.add(out_dir, &ckpt);

    let loss_path = out_dir.join("loss.csv");
    let mut loss_csv = String::from("iteration,loss\n");
    for (it, l) in &log.loss {
        loss_csv.push_str(&format!("{it},{l}\n"));
    }
    std::fs::write(&loss_path, loss_csv)?;
    manifest_out.add(out_dir, &loss_path);

    let val_path = out_dir.join("validation.csv");
    let mut val_csv = String::from("iteration,val_mse_sigma1\n");
    for (it, v) in &log.val_mse {
        val_csv.push_str(&format!("{it},{v}\n"));
    }
    std::fs::write(&val_path, val_csv)?;
    manifest_out.add(out_dir, &val_path);

    write_resolved(out_dir, &cfg)?;
    manifest_out.files.push("resolved-config.toml".to_string());
    manifest_out.write(out_dir)?;
    let last = log.val_mse.last().map(|(_, v)| *v).unwrap_or(f64::NAN);
    println!(
        "checkpoint {} (final validation denoising MSE at sigma=1: {last:.5})",
        ckpt.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn export_ensemble(
    dir: &Path,
    out_dir: &Path,
    ensemble: &sda_core::field::Ensemble,
    manifest: &mut RunManifest,
    physical: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rasters = RasterWriter::new();
    for (i, member) in ensemble.members().iter().enumerate() {
        let path = dir.join(format!("member_{i:03}.sdag"));
        write_grid_file(&path, member)?;
        manifest.add(out_dir, &path);
    }
    let mean = ensemble.mean();
    let std = ensemble.std();
    let mean_path = dir.join("mean.sdag");
    write_grid_file(&mean_path, &mean)?;
    manifest.add(out_dir, &mean_path);
    let std_path = dir.join("std.sdag");
    write_grid_file(&std_path, &std)?;
    manifest.add(out_dir, &std_path);

    rasters.write_grid(dir, "member_000", &ensemble.members()[0], manifest, out_dir)?;
    rasters.write_grid(dir, "mean", &mean, manifest, out_dir)?;
    rasters.write_grid(dir, "std", &std, manifest, out_dir)?;
    rasters.write_sidecar(dir, manifest, out_dir)?;
    if physical {
        // Members and mean in physical units; pointwise std of transformed
        // values has no physical-space counterpart and stays model-space.
        for (i, member) in ensemble.members().iter().enumerate() {
            let phys = sda_core::field::to_physical(member)?;
            let path = dir.join(format!("member_{i:03}_physical.sdag"));
            write_grid_file(&path, &phys)?;
            manifest.add(out_dir, &path);
        }
        let phys_mean = sda_core::field::to_physical(&mean)?;
        let path = dir.join("mean_physical.sdag");
        write_grid_file(&path, &phys_mean)?;
        manifest.add(out_dir, &path);
    }
    Ok(())
}

fn cmd_sample(out_dir: &Path, cfg: SampleConfig, flags: GuidanceKeys) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let prior_path = cfg
        .prior
        .clone()
        .ok_or_else(|| anyhow!("sample requires a prior (--prior)"))?;
    let prior = load_prior(&prior_path)?;
    let guidance = cfg.guidance.resolve(&flags, cfg.seed)?;
    let mut manifest = RunManifest::new("sample");

    let ensemble = match cfg.schedule.as_str() {
        "vp" => assimilate_ensemble(prior.as_ref(), None, &guidance, cfg.members)?,
        "edm" => {
            let schedule = EdmSchedule {
                n_steps: guidance.n_steps,
                ..EdmSchedule::default()
            };
            let mut members = Vec::with_capacity(cfg.members);
            for r in 0..cfg.members {
                members.push(sample_edm(prior.as_ref(), &schedule, cfg.seed.wrapping_add(r as u64))?);
            }
            sda_core::field::Ensemble::new(members, (0..cfg.members as u64).collect())?
        }
        other => bail!("unknown schedule '{other}' (expected 'vp' or 'edm')"),
    };
    export_ensemble(out_dir, out_dir, &ensemble, &mut manifest, cfg.physical)?;
    let mut resolved = cfg.clone();
    resolved.guidance = GuidanceKeys {
        preset: None,
        n_steps: Some(guidance.n_steps),
        corrections: Some(guidance.corrections),
        tau_tilde: Some(guidance.tau_tilde),
        gamma: Some(guidance.gamma),
        sqrt_sigma_y: Some(guidance.sqrt_sigma_y),
    };
    write_resolved(out_dir, &resolved)?;
    manifest.files.push("resolved-config.toml".to_string());
    manifest.write(out_dir)?;
    println!(
        "wrote {} unconditional member(s) to {}",
        ensemble.len(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_assimilate(out_dir: &Path, cfg: AssimilateConfig, flags: GuidanceKeys) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let prior_path = cfg
        .prior
        .clone()
        .ok_or_else(|| anyhow!("assimilate requires a prior (--prior)"))?;
    let obs_path = cfg
        .observations
        .clone()
        .ok_or_else(|| anyhow!("assimilate requires an observation CSV (--observations)"))?;
    let prior = load_prior(&prior_path)?;
    let guidance = cfg.guidance.resolve(&flags, cfg.seed)?;

    let file = std::fs::File::open(&obs_path)
        .with_context(|| format!("cannot open {}", obs_path.display()))?;
    let mut groups = read_observation_csv(
        file,
        prior.channels(),
        prior.norm(),
        guidance.sqrt_sigma_y,
    )?;
    if groups.is_empty() {
        // An empty observation file means unconditional sampling; outputs
        // must match `sample` bit-for-bit at the same seed.
        groups.push(sda_core::io::TimedObservations {
            time: "unconstrained".to_string(),
            set: sda_core::obs::ObservationSet::empty(),
        });
    }
    let shape = GridShape {
        channels: prior.channels().len(),
        height: prior.height(),
        width: prior.width(),
    };
    let mut manifest = RunManifest::new("assimilate");
    let single = groups.len() == 1;
    for group in &groups {
        let lik = LikelihoodModel::from_observations(&group.set, shape)?;
        let ensemble = assimilate_ensemble(prior.as_ref(), Some(&lik), &guidance, cfg.members)?;
        let dir = if single {
            out_dir.to_path_buf()
        } else {
            out_dir.join(sanitize_time_key(&group.time))
        };
        export_ensemble(&dir, out_dir, &ensemble, &mut manifest, cfg.physical)?;
        println!(
            "time {}: assimilated {} observation(s) into {} member(s)",
            group.time,
            group.set.len(),
            ensemble.len()
        );
    }
    let mut resolved = cfg.clone();
    resolved.guidance = GuidanceKeys {
        preset: None,
        n_steps: Some(guidance.n_steps),
        corrections: Some(guidance.corrections),
        tau_tilde: Some(guidance.tau_tilde),
        gamma: Some(guidance.gamma),
        sqrt_sigma_y: Some(guidance.sqrt_sigma_y),
    };
    write_resolved(out_dir, &resolved)?;
    manifest.files.push("resolved-config.toml".to_string());
    manifest.write(out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(out_dir: &Path, cfg: EvaluateConfig) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let ens_dir = cfg
        .ensemble_dir
        .clone()
        .ok_or_else(|| anyhow!("evaluate requires --ensemble-dir"))?;
    let obs_path = cfg
        .observations
        .clone()
        .ok_or_else(|| anyhow!("evaluate requires --observations"))?;

    // Times come from the observation file; member grids from the matching
    // directory layout written by `assimilate`.
    let load_members = |dir: &Path| -> Result<Vec<FieldGrid>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("cannot read {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .map(|n| {
                        let n = n.to_string_lossy();
                        n.starts_with("member_") && n.ends_with(".sdag")
                    })
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            bail!("no member_*.sdag files in {}", dir.display());
        }
        paths.iter().map(|p| Ok(read_grid_file(p)?)).collect()
    };

    // Channel layout from any member set.
    let probe_members = {
        let direct = load_members(&ens_dir);
        match direct {
            Ok(m) => m,
            Err(_) => {
                // Multi-time layout: first subdirectory.
                let sub = std::fs::read_dir(&ens_dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .find(|p| p.is_dir())
                    .ok_or_else(|| anyhow!("no ensemble members under {}", ens_dir.display()))?;
                load_members(&sub)?
            }
        }
    };
    let channels = probe_members[0].channels().to_vec();
    let norm = probe_members[0].norm().clone();

    let file = std::fs::File::open(&obs_path)
        .with_context(|| format!("cannot open {}", obs_path.display()))?;
    let groups = read_observation_csv(file, &channels, &norm, cfg.default_sigma)?;
    if groups.is_empty() {
        bail!("observation file {} holds no rows", obs_path.display());
    }

    let mut points = Vec::new();
    for (t, group) in groups.iter().enumerate() {
        let dir = if groups.len() == 1 {
            ens_dir.clone()
        } else {
            ens_dir.join(sanitize_time_key(&group.time))
        };
        let members = load_members(&dir)?;
        for obs in group.set.observations() {
            let values: Vec<f64> = members
                .iter()
                .map(|m| m.get(obs.channel, obs.row, obs.col))
                .collect();
            points.push(ScoredPoint {
                channel: obs.channel,
                time: t,
                members: values,
                obs: obs.value,
                sigma: obs.sigma,
            });
        }
    }
    let names: Vec<String> = channels.iter().map(|c| c.name.clone()).collect();
    let report = EvalReport::compute(&points, &names, cfg.bootstrap_iterations, cfg.seed)?;

    let mut manifest = RunManifest::new("evaluate");
    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    manifest.add(out_dir, &csv_path);
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    manifest.add(out_dir, &json_path);
    write_resolved(out_dir, &cfg)?;
    manifest.files.push("resolved-config.toml".to_string());
    manifest.write(out_dir)?;
    for c in &report.channels {
        println!(
            "{}: mse_mean {:.4} mse_single {:.4} mae_mean {:.4} crps {:.4} var_ens {:.4}",
            c.channel, c.mse_mean, c.mse_single, c.mae_mean, c.crps, c.var_ens
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_station_sweep(out_dir: &Path, cfg: SweepConfig, flags: GuidanceKeys) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let manifest_path = cfg
        .data_manifest
        .clone()
        .ok_or_else(|| anyhow!("station-sweep requires a dataset manifest (--data)"))?;
    let (data_manifest, grids) = read_dataset(&manifest_path)?;
    if grids.len() < cfg.n_times {
        bail!(
            "dataset holds {} grids, sweep wants {}",
            grids.len(),
            cfg.n_times
        );
    }
    let prior: Box<dyn Denoiser> = match &cfg.prior {
        Some(p) => load_prior(p)?,
        None => {
            let cov = covariance_from_spec(&data_manifest.spec)?;
            Box::new(GaussianAnalyticDenoiser::zero_mean(
                data_manifest.spec.channels(),
                &cov,
            )?)
        }
    };
    let guidance = cfg.guidance.resolve(&flags, cfg.seed)?;
    let truths = &grids[..cfg.n_times];
    let (h, w) = (truths[0].height(), truths[0].width());
    let n_channels = truths[0].channel_count();

    // Distinct station locations from the split seed.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.split_seed);
    let mut locations = std::collections::BTreeSet::new();
    while locations.len() < cfg.n_stations {
        locations.insert((rng.gen_range(0..h), rng.gen_range(0..w)));
    }
    let stations: Vec<(usize, usize)> = locations.into_iter().collect();

    let shape = GridShape {
        channels: n_channels,
        height: h,
        width: w,
    };
    let noise_std = vec![guidance.sqrt_sigma_y; n_channels];
    let rows = station_sweep(
        &stations,
        &cfg.counts,
        truths,
        &noise_std,
        cfg.split_seed,
        |obs, t| {
            let lik = LikelihoodModel::from_observations(obs, shape)?;
            let member_cfg = GuidanceConfig {
                seed: guidance.seed.wrapping_add(1 + t as u64),
                ..guidance
            };
            sda_core::guidance::assimilate(prior.as_ref(), Some(&lik), &member_cfg)
        },
    )?;

    let mut manifest = RunManifest::new("station-sweep");
    let csv_path = out_dir.join("rmse_vs_count.csv");
    let mut csv = String::from("guide_count,eval_count,channel,rmse,small_eval_set\n");
    let names: Vec<String> = truths[0].channels().iter().map(|c| c.name.clone()).collect();
    for row in &rows {
        for (c, r) in row.per_channel_rmse.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.guide_count, row.eval_count, names[c], r, row.small_eval_set
            ));
        }
    }
    std::fs::write(&csv_path, csv)?;
    manifest.add(out_dir, &csv_path);
    write_resolved(out_dir, &cfg)?;
    manifest.files.push("resolved-config.toml".to_string());
    manifest.write(out_dir)?;
    for row in &rows {
        println!(
            "guide {} -> eval {}: rmse {:?}{}",
            row.guide_count,
            row.eval_count,
            row.per_channel_rmse,
            if row.small_eval_set { " (small evaluation set)" } else { "" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check(out_dir: &Path, cfg: OracleConfig) -> Result<ExitCode> {
    prepare_out_dir(out_dir)?;
    let checks = oracle::linear_gaussian_suite(cfg.members)?;
    for check in &checks {
        println!("{}", check.summary_line());
    }
    let json_path = out_dir.join("oracle-report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&checks)?)?;
    write_resolved(out_dir, &cfg)?;
    let mut manifest = RunManifest::new("oracle-check");
    manifest.add(out_dir, &json_path);
    manifest.files.push("resolved-config.toml".to_string());
    manifest.write(out_dir)?;
    if checks.iter().all(|c| c.pass) {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: verification checks failed");
        Ok(ExitCode::from(3))
    }
}
