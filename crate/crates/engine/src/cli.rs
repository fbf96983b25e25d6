//! The `kipa` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kipa_core::cc3d::{connected_components, connected_components_with_image, Connectivity};
use kipa_core::loss_check::{run_loss_check, LossCheckPlan};
use kipa_core::pipeline::{generate_phantom_with, make_stub_predictor, PhantomOptions, StageId, StubMode};
use kipa_core::preprocess::{compute_foreground_stats, resample, zscore_normalize, Interpolation};
use kipa_core::volume::{Class, ProbVolume};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{EngineError, Result};
use crate::fsutil::write_json;
use crate::nifti::{self, ReadOptions};
use crate::predictors::{serve, serve_unix, write_prob_maps, ProbDirServer};
use crate::report::{evaluate_dirs, write_report};
use crate::runner::{discover_cases, inference_grid, run_batch, truth_path};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "kipa", version, about = "Multi-stage renal structure segmentation engine")]
pub struct Cli {
    /// Pipeline config (TOML or JSON).
    #[arg(long, global = true, env = "KIPA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "KIPA_SEED")]
    pub seed: Option<u64>,
    /// Case-level worker threads; overrides the config.
    #[arg(long, global = true, env = "KIPA_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// error, warn, info, debug or trace; debug and trace log JSON lines.
    #[arg(long, global = true, env = "KIPA_LOG_LEVEL", default_value = "info")]
    pub log_level: tracing::Level,
    /// Output directory (or report file for loss-check and components).
    #[arg(long, global = true, env = "KIPA_OUT")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom cases (image + truth).
    Phantom(PhantomArgs),
    /// Fit foreground normalization statistics.
    Preprocess(PreprocessArgs),
    /// Run the pipeline over a set of case images.
    Run(RunArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference verification of the losses.
    LossCheck(LossCheckArgs),
    /// Connected-component report of a mask.
    Components(ComponentsArgs),
    /// Answer predictor protocol requests from a probability directory.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Edge length, or three comma-separated extents.
    #[arg(long, value_delimiter = ',', num_args = 1..=3, default_value = "96")]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Add a fluid cyst next to the kidney (labeled background).
    #[arg(long)]
    pub cyst: bool,
    /// Also write oracle probability maps for a file-backed predictor here.
    #[arg(long)]
    pub oracle_probs: Option<PathBuf>,
    /// Noise scale of the oracle maps; 0 writes one-hot maps.
    #[arg(long, default_value_t = 0.0)]
    pub oracle_sigma: f64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Glob of training images.
    #[arg(long)]
    pub images: String,
    /// Directory holding `{case}_truth.nii.gz` for each image.
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write resampled, normalized images into `<out>/resampled`.
    #[arg(long)]
    pub write_resampled: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Glob of input images; case ids come from file names.
    #[arg(long)]
    pub cases: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    /// Tensor sizes as CLASSESxVOXELS.
    #[arg(long, value_delimiter = ',', default_value = "2x64,5x512,5x4096")]
    pub sizes: Vec<String>,
    #[arg(long, default_value_t = 9)]
    pub trials: usize,
    #[arg(long = "thresholds", value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    pub max_entries: usize,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct ComponentsArgs {
    /// Label volume.
    #[arg(long)]
    pub mask: PathBuf,
    /// Class code to analyse; any nonzero label when absent.
    #[arg(long)]
    pub class: Option<u8>,
    #[arg(long, default_value = "26")]
    pub connectivity: String,
    /// Image on the same grid, for per-component HU statistics.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of `{case}_{stage}_{class}.nii.gz` maps.
    #[arg(long)]
    pub prob_dir: PathBuf,
    /// Listen on this Unix socket instead of stdin/stdout.
    #[arg(long)]
    pub socket: Option<PathBuf>,
}

fn init_logging(level: tracing::Level) {
    let filter = tracing_subscriber::EnvFilter::builder()
        .with_default_directive(level.into())
        .from_env_lossy();
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    let _ = if level >= tracing::Level::DEBUG {
        builder.json().try_init()
    } else {
        builder.try_init()
    };
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| EngineError::config("out", "this subcommand needs --out"))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| EngineError::config("config", "this subcommand needs --config"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w as usize;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_options(cli: &Cli) -> Result<ReadOptions> {
    Ok(match &cli.config {
        Some(_) => load_config(cli)?.io,
        None => ReadOptions::default(),
    })
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| EngineError::Invalid(e.to_string()))?;
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn cmd_phantom(cli: &Cli, a: &PhantomArgs) -> Result<u8> {
    let out = require_out(cli)?;
    let size = match a.size.as_slice() {
        [n] => [*n; 3],
        [x, y, z] => [*x, *y, *z],
        _ => return Err(EngineError::config("size", "give one edge length or three extents")),
    };
    let seed = cli.seed.unwrap_or(0);
    let opts = PhantomOptions {
        cyst: a.cyst,
        ..Default::default()
    };
    for i in 0..a.count {
        let case_seed = seed.wrapping_add(i as u64);
        let id = format!("phantom_{case_seed:04}");
        let ph = generate_phantom_with(case_seed, size, &opts)?;
        nifti::write_scalar(&out.join(format!("{id}_image.nii.gz")), &ph.image)?;
        nifti::write_labels(&truth_path(out, &id), &ph.labels)?;
        if let Some(dir) = &a.oracle_probs {
            let mode = if a.oracle_sigma > 0.0 {
                StubMode::Noisy { sigma: a.oracle_sigma }
            } else {
                StubMode::Ideal
            };
            let grid = inference_grid(ph.image.header(), kipa_core::preprocess::TARGET_SPACING);
            for stage in StageId::ALL {
                let stub = make_stub_predictor(&mode, &ph.labels, &grid, stage, case_seed)?;
                let prob = ProbVolume::new(grid.clone(), stub.field().to_vec())?;
                write_prob_maps(dir, &id, stage, &prob)?;
            }
        }
        tracing::info!(case = %id, "phantom written");
    }
    Ok(EXIT_OK)
}

fn cmd_preprocess(cli: &Cli, a: &PreprocessArgs) -> Result<u8> {
    let out = require_out(cli)?;
    let opts = read_options(cli)?;
    let cases = discover_cases(&a.images)?;
    if cases.is_empty() {
        return Err(EngineError::config("images", format!("no files match {:?}", a.images)));
    }
    let mut loaded = Vec::new();
    for (id, p) in &cases {
        let img = nifti::read_scalar(p, &opts)?;
        let truth = nifti::read_labels(&truth_path(&a.truth, id), &opts)?;
        loaded.push((id, img, truth));
    }
    let pairs: Vec<_> = loaded.iter().map(|(_, i, t)| (i, t)).collect();
    let stats = compute_foreground_stats(&pairs)?;
    write_json(&out.join("stats.json"), &stats)?;
    if a.write_resampled {
        let spacing = match &cli.config {
            Some(_) => load_config(cli)?.target_spacing,
            None => kipa_core::preprocess::TARGET_SPACING,
        };
        for (id, img, _) in &loaded {
            let r = zscore_normalize(&resample(img, spacing, Interpolation::Linear)?, &stats);
            nifti::write_scalar(&out.join("resampled").join(format!("{id}_image.nii.gz")), &r)?;
        }
    }
    tracing::info!(mean = stats.mean, std = stats.std, voxels = stats.voxel_count, "statistics fitted");
    Ok(EXIT_OK)
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> Result<u8> {
    let cfg = load_config(cli)?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| EngineError::config("output_dir", "set output_dir or pass --out"))?;
    let cases = discover_cases(&a.cases)?;
    if cases.is_empty() {
        return Err(EngineError::config("cases", format!("no files match {:?}", a.cases)));
    }
    let summary = run_batch(&cfg, &cases, &out)?;
    tracing::info!(succeeded = summary.succeeded.len(), failed = summary.failures.len(), "run finished");
    Ok(if summary.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<u8> {
    let out = require_out(cli)?;
    let report = evaluate_dirs(&a.pred, &a.truth, &read_options(cli)?).map_err(|e| match e {
        EngineError::Invalid(m) => EngineError::config("pred", m),
        e => e,
    })?;
    write_report(out, &report)?;
    for agg in &report.aggregate {
        tracing::info!(structure = agg.structure.name(), dsc = agg.dsc.mean, hd = agg.hd.mean, avd = agg.avd.mean, "aggregate");
    }
    Ok(if report.errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || EngineError::config("sizes", format!("expected CLASSESxVOXELS, got {s:?}"));
    let (c, n) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((c.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?))
}

fn cmd_loss_check(cli: &Cli, a: &LossCheckArgs) -> Result<u8> {
    let plan = LossCheckPlan {
        sizes: a.sizes.iter().map(|s| parse_size(s)).collect::<Result<_>>()?,
        thresholds: a.thresholds.clone(),
        trials: a.trials,
        max_entries: a.max_entries,
        seed: cli.seed.unwrap_or(0),
        corrupt_gradient: a.corrupt_gradient,
    };
    let report = run_loss_check(&plan)?;
    emit(cli.out.as_deref(), &report)?;
    if report.pass {
        return Ok(EXIT_OK);
    }
    for r in report.failures() {
        eprintln!(
            "FAIL {} classes={} voxels={} T={} max_rel_grad_err={:.3e}",
            r.loss, r.classes, r.voxels, r.threshold, r.max_rel_grad_err
        );
    }
    Ok(EXIT_VERIFY)
}

fn cmd_components(cli: &Cli, a: &ComponentsArgs) -> Result<u8> {
    let opts = read_options(cli)?;
    let conn = match a.connectivity.as_str() {
        "6" => Connectivity::Six,
        "26" => Connectivity::TwentySix,
        other => return Err(EngineError::config("connectivity", format!("expected 6 or 26, got {other:?}"))),
    };
    let labels = nifti::read_labels(&a.mask, &opts)?;
    let mask = match a.class {
        Some(c) => {
            let class = Class::from_code(c).ok_or_else(|| EngineError::config("class", format!("unknown class {c}")))?;
            labels.class_mask(class)
        }
        None => labels.map(|&l| l != 0),
    };
    let set = match &a.image {
        Some(p) => connected_components_with_image(&mask, conn, &nifti::read_scalar(p, &opts)?)?,
        None => connected_components(&mask, conn),
    };
    emit(cli.out.as_deref(), &set.report())?;
    Ok(EXIT_OK)
}

fn cmd_serve(cli: &Cli, a: &ServeArgs) -> Result<u8> {
    let server = ProbDirServer::new(a.prob_dir.clone(), read_options(cli)?);
    match &a.socket {
        Some(path) => serve_unix(path, &server)?,
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let mut w = std::io::BufWriter::new(stdout.lock());
            let n = serve(&mut stdin.lock(), &mut w, &server)?;
            w.flush().map_err(|e| EngineError::Protocol(e.to_string()))?;
            tracing::debug!(requests = n, "input closed");
        }
    }
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(cli, a),
        Command::Preprocess(a) => cmd_preprocess(cli, a),
        Command::Run(a) => cmd_run(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::LossCheck(a) => cmd_loss_check(cli, a),
        Command::Components(a) => cmd_components(cli, a),
        Command::Serve(a) => cmd_serve(cli, a),
    }
}

/// Parses arguments, runs the subcommand and maps the outcome to an exit code.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    init_logging(cli.log_level);
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
