//! Command-line front end for fitting, resampling and verifying neural heat
//! fields.
//!
//! Every subcommand is a plain function (`cmd_*`) so it can be driven from
//! tests without spawning a process. [`run`] parses arguments, applies the
//! optional `key=value` config file and maps outcomes to exit codes:
//! 0 success, 1 runtime or verification failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use heatfield::format::{load_field, load_grid, save_field, save_grid, FieldFile, FieldFlags, GridFile};
use heatfield::image_io::{load_image, luma, save_image, ImageBuffer};
use heatfield::oracle::{blur_reference, dft_spectrum, normalized_log_spectrum, BlurOracleConfig, Boundary};
use heatfield::sampling::upsampled_len;
use heatfield::{
    fit_global_field, fit_local_grid, global_kappa, gradient_map, init_wave_bank, kappa_for, rasterize,
    rasterize_local_grid, scale_to_time, BankConfig, Domain, EvalPoint, FieldParams, FitConfig, GradientMode,
    HeatField, KappaMode, LocalTarget, SamplingSpec, Trainable, WaveBank,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "heatfield", version, about = "Fit, resample and verify neural heat fields", args_override_self = true)]
pub struct Cli {
    /// File of `key=value` lines used as defaults for long flags; flags given
    /// on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for rasterization and fitting. Results do not depend
    /// on this value.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a global field to an image observed at t = 1.
    Fit(FitArgs),
    /// Fit a grid of local fields to a low-resolution image and
    /// high-resolution targets.
    FitLocal(FitLocalArgs),
    /// Rasterize a field at a subsampling scale or an explicit time.
    Resample(ResampleArgs),
    /// Compare analytic filtering against supersampled Gaussian convolution.
    VerifyAa(VerifyAaArgs),
    /// Fuzz the heat-equation residual of random fields.
    VerifyHeat(VerifyHeatArgs),
    /// Write the log-magnitude spectrum of an image.
    Spectrum(SpectrumArgs),
    /// Write the spatial gradient magnitude of a field.
    Gradmap(GradmapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaArg {
    PaperLiteral,
    SelfConsistent,
}

impl From<KappaArg> for KappaMode {
    fn from(k: KappaArg) -> Self {
        match k {
            KappaArg::PaperLiteral => KappaMode::PaperLiteral,
            KappaArg::SelfConsistent => KappaMode::SelfConsistent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryArg {
    Reflect,
    Periodic,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    pub input: PathBuf,
    /// Output field file (default: the input path with extension `nhf`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub components: usize,
    /// Bank cutoff in cycles per unit (default: a quarter of the image's
    /// longer side in pixels).
    #[arg(long)]
    pub max_freq: Option<f64>,
    #[arg(long, value_enum, default_value_t = KappaArg::SelfConsistent)]
    pub kappa_mode: KappaArg,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tv_weight: f64,
    #[arg(long, default_value_t = 1024)]
    pub tv_samples: usize,
    /// Pixels per step (default: all).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub train_waves: bool,
    #[arg(long)]
    pub train_kappa: bool,
    /// Report CSV (default: the output path with extension `csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitLocalArgs {
    /// Low-resolution image; each pixel becomes one local field.
    pub lr: PathBuf,
    /// Supervision as `SCALE:PATH`, repeatable.
    #[arg(long = "target", value_name = "SCALE:PATH", required = true, value_parser = parse_target)]
    pub targets: Vec<(f64, PathBuf)>,
    /// Output grid file (default: the LR path with extension `nhg`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub components: usize,
    /// Bank cutoff in cycles per cell (default: half the largest scale).
    #[arg(long)]
    pub max_freq: Option<f64>,
    #[arg(long, value_enum, default_value_t = KappaArg::SelfConsistent)]
    pub kappa_mode: KappaArg,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tv_weight: f64,
    #[arg(long, default_value_t = 1024)]
    pub tv_samples: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_target(s: &str) -> Result<(f64, PathBuf), String> {
    let (scale, path) = s
        .split_once(':')
        .ok_or_else(|| format!("expected SCALE:PATH, got {s:?}"))?;
    let scale: f64 = scale.parse().map_err(|e| format!("bad scale {scale:?}: {e}"))?;
    Ok((scale, PathBuf::from(path)))
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("when").required(true).args(["scale", "time"])))]
pub struct ResampleArgs {
    /// Field (`NHF1`) or local grid (`NHG1`) file.
    pub field: PathBuf,
    /// Subsampling factor S; the field is observed at t = S². Values below
    /// one upsample.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Observation time.
    #[arg(long)]
    pub time: Option<f64>,
    /// Output size (default: the native size divided by √t).
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyAaArgs {
    pub field: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub delta_t: f64,
    /// Output size (default: the field's native size).
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub supersample: usize,
    #[arg(long, default_value_t = 5.0)]
    pub truncation: f64,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Reflect)]
    pub boundary: BoundaryArg,
    /// Convolve only over the output domain instead of a kernel-wide margin.
    #[arg(long)]
    pub no_extend: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    /// Write `|analytic − reference|`, scaled to its maximum, as an image.
    #[arg(long)]
    pub error_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyHeatArgs {
    /// Fuzz points on this field instead of on random fields.
    pub field: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SpectrumArgs {
    pub image: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradmapArgs {
    pub field: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub time: f64,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Globals {
    pub seed: u64,
    pub threads: usize,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or inputs: exit code 2.
    Usage(String),
    /// Runtime failure: exit code 1.
    Runtime(anyhow::Error),
    /// A verification ran and did not pass: exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
            CliError::Failed(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: heatfield::Error) -> CliError {
    CliError::Runtime(e.into())
}

type CliResult<T> = Result<T, CliError>;

/// Provenance written beside every primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, A: Serialize> {
    pub subcommand: &'a str,
    pub flags: &'a A,
    pub seed: u64,
    pub threads: usize,
    pub tool_version: &'a str,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `out.ext` → `out.ext.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest<A: Serialize>(
    subcommand: &str,
    flags: &A,
    g: &Globals,
    inputs: &[&Path],
    outputs: &[&Path],
) -> CliResult<PathBuf> {
    let manifest = RunManifest {
        subcommand,
        flags,
        seed: g.seed,
        threads: g.threads,
        tool_version: TOOL_VERSION,
        inputs: inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<CliResult<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = manifest_path(outputs[0]);
    let json = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", path.display())))
    }
}

fn read_image(path: &Path) -> CliResult<ImageBuffer> {
    require_file(path)?;
    load_image(path).map_err(runtime)
}

fn write_image(buf: &ImageBuffer, path: &Path) -> CliResult<()> {
    save_image(buf, path).map_err(runtime)
}

fn read_field(path: &Path) -> CliResult<FieldFile> {
    require_file(path)?;
    load_field(path).map_err(runtime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub field_path: PathBuf,
    pub report_path: PathBuf,
    pub manifest_path: PathBuf,
    pub final_mae: f64,
    pub final_psnr: f64,
}

pub fn cmd_fit(args: &FitArgs, g: &Globals) -> CliResult<FitOutcome> {
    let target = read_image(&args.input)?;
    let native = target.width().max(target.height()) as f64;
    let bank_cfg = BankConfig {
        components: args.components,
        max_frequency: args.max_freq.unwrap_or(native / 4.0),
        seed: g.seed,
    };
    bank_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let trainable = Trainable {
        waves: args.train_waves,
        kappa: args.train_kappa,
    };
    let cfg = FitConfig {
        steps: args.steps,
        lr0: args.lr,
        tv_weight: args.tv_weight,
        tv_samples: args.tv_samples,
        batch: args.batch,
        seed: g.seed,
        trainable,
        ..FitConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let bank = init_wave_bank(&bank_cfg).map_err(runtime)?;
    let kappa = global_kappa(&target, args.kappa_mode.into()).map_err(runtime)?;
    let (field, report) = fit_global_field(&target, bank, kappa, &cfg).map_err(runtime)?;

    let out = args.out.clone().unwrap_or_else(|| args.input.with_extension("nhf"));
    let report_path = args.report.clone().unwrap_or_else(|| out.with_extension("csv"));
    let file = FieldFile {
        field,
        width: target.width() as u32,
        height: target.height() as u32,
        flags: FieldFlags {
            kappa_mode: args.kappa_mode.into(),
            trained: trainable,
        },
    };
    save_field(&file, &out).map_err(runtime)?;
    report.write_csv(&report_path).map_err(runtime)?;
    let manifest_path = write_manifest("fit", args, g, &[&args.input], &[&out, &report_path])?;
    println!(
        "fit: mae={:.6} psnr={:.3} dB -> {}",
        report.final_mae,
        report.final_psnr,
        out.display()
    );
    Ok(FitOutcome {
        field_path: out,
        report_path,
        manifest_path,
        final_mae: report.final_mae,
        final_psnr: report.final_psnr,
    })
}

pub fn cmd_fit_local(args: &FitLocalArgs, g: &Globals) -> CliResult<FitOutcome> {
    let lr = read_image(&args.lr)?;
    let mut targets = Vec::with_capacity(args.targets.len());
    for (scale, path) in &args.targets {
        let image = read_image(path)?;
        if !(*scale >= 1.0) {
            return Err(usage(format!("target scale must be >= 1, got {scale}")));
        }
        let (w, h) = (upsampled_len(lr.width(), *scale), upsampled_len(lr.height(), *scale));
        if image.width() != w || image.height() != h || image.channels() != lr.channels() {
            return Err(usage(format!(
                "{} is {}x{}, expected {}x{} for scale {}",
                path.display(),
                image.width(),
                image.height(),
                w,
                h,
                scale
            )));
        }
        targets.push(LocalTarget { scale: *scale, image });
    }
    let top = targets.iter().map(|t| t.scale).fold(1.0, f64::max);
    let bank_cfg = BankConfig {
        components: args.components,
        max_frequency: args.max_freq.unwrap_or(top / 2.0),
        seed: g.seed,
    };
    bank_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = FitConfig {
        steps: args.steps,
        lr0: args.learning_rate,
        tv_weight: args.tv_weight,
        tv_samples: args.tv_samples,
        seed: g.seed,
        ..FitConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let bank = init_wave_bank(&bank_cfg).map_err(runtime)?;
    // each cell spans one unit, sampled once by the LR pixel
    let kappa = kappa_for(1.0, args.kappa_mode.into()).map_err(runtime)?;
    let (grid, report) = fit_local_grid(&lr, &targets, bank, kappa, &cfg).map_err(runtime)?;

    let out = args.out.clone().unwrap_or_else(|| args.lr.with_extension("nhg"));
    let report_path = args.report.clone().unwrap_or_else(|| out.with_extension("csv"));
    save_grid(
        &GridFile {
            grid,
            flags: FieldFlags {
                kappa_mode: args.kappa_mode.into(),
                trained: Trainable::default(),
            },
        },
        &out,
    )
    .map_err(runtime)?;
    report.write_csv(&report_path).map_err(runtime)?;
    let mut inputs: Vec<&Path> = vec![&args.lr];
    inputs.extend(args.targets.iter().map(|(_, p)| p.as_path()));
    let manifest_path = write_manifest("fit-local", args, g, &inputs, &[&out, &report_path])?;
    println!(
        "fit-local: mae={:.6} psnr={:.3} dB -> {}",
        report.final_mae,
        report.final_psnr,
        out.display()
    );
    Ok(FitOutcome {
        field_path: out,
        report_path,
        manifest_path,
        final_mae: report.final_mae,
        final_psnr: report.final_psnr,
    })
}

fn observation_time(scale: Option<f64>, time: Option<f64>) -> CliResult<f64> {
    match (scale, time) {
        (Some(s), None) => scale_to_time(s).map_err(|e| usage(e.to_string())),
        (None, Some(t)) if t >= 0.0 && t.is_finite() => Ok(t),
        (None, Some(t)) => Err(usage(format!("time must be >= 0, got {t}"))),
        _ => Err(usage("exactly one of --scale and --time is required")),
    }
}

fn native_spec(file: &FieldFile, size: Option<(usize, usize)>, t: f64) -> CliResult<SamplingSpec> {
    let (w, h) = (file.width as usize, file.height as usize);
    let (ow, oh) = size.unwrap_or((w, h));
    if ow == 0 || oh == 0 {
        return Err(usage("output size must be positive"));
    }
    SamplingSpec::with_domain(ow, oh, t, Domain::for_raster(w, h)).map_err(|e| usage(e.to_string()))
}

fn size_of(width: Option<usize>, height: Option<usize>) -> Option<(usize, usize)> {
    width.zip(height)
}

/// Rasterize and write a resampled image; returns the float raster.
pub fn cmd_resample(args: &ResampleArgs, g: &Globals) -> CliResult<ImageBuffer> {
    require_file(&args.field)?;
    let t = observation_time(args.scale, args.time)?;
    let magic = std::fs::read(&args.field)
        .with_context(|| format!("reading {}", args.field.display()))?
        .get(..4)
        .map(<[u8]>::to_vec)
        .unwrap_or_default();

    let raster = if magic == b"NHG1" {
        if args.width.is_some() {
            return Err(usage("local grids are rasterized at their own upsampled size"));
        }
        if t == 0.0 {
            return Err(usage("local grids need t > 0"));
        }
        let r = 1.0 / t.sqrt();
        if r < 1.0 {
            return Err(usage(format!("local grids only upsample; t = {t} means ×{r}")));
        }
        let grid = load_grid(&args.field).map_err(runtime)?.grid;
        rasterize_local_grid(&grid, r).map_err(runtime)?
    } else {
        let file = read_field(&args.field)?;
        let size = size_of(args.width, args.height).or_else(|| {
            let shrink = t.sqrt().max(f64::MIN_POSITIVE);
            let f = |n: u32| ((n as f64 / shrink).round() as usize).max(1);
            Some((f(file.width), f(file.height)))
        });
        let spec = native_spec(&file, size, t)?;
        rasterize(&file.field, &spec).map_err(runtime)?
    };
    write_image(&raster, &args.out)?;
    write_manifest("resample", args, g, &[&args.field], &[&args.out])?;
    println!(
        "resample: t={t} {}x{} -> {}",
        raster.width(),
        raster.height(),
        args.out.display()
    );
    Ok(raster)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AaOutcome {
    pub max_abs_err: f64,
    pub threshold: f64,
}

impl AaOutcome {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= self.threshold
    }
}

/// Compare `rasterize(t0 + Δ)` against the supersampled convolution oracle.
/// Returns the measurement whether or not it passes; [`run`] maps a failed
/// comparison to exit code 1.
pub fn cmd_verify_aa(args: &VerifyAaArgs, g: &Globals) -> CliResult<AaOutcome> {
    if !(args.delta_t > 0.0) {
        return Err(usage(format!("--delta-t must be positive, got {}", args.delta_t)));
    }
    if !(args.t0 >= 0.0) {
        return Err(usage(format!("--t0 must be >= 0, got {}", args.t0)));
    }
    let cfg = BlurOracleConfig {
        supersample: args.supersample,
        kernel_truncation: args.truncation,
        boundary: match args.boundary {
            BoundaryArg::Reflect => Boundary::Reflect,
            BoundaryArg::Periodic => Boundary::Periodic,
        },
        extend_domain: !args.no_extend,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let file = read_field(&args.field)?;
    let spec = native_spec(&file, size_of(args.width, args.height), args.t0 + args.delta_t)?;
    let analytic = rasterize(&file.field, &spec).map_err(runtime)?;
    let reference = blur_reference(&file.field, args.t0, args.delta_t, &spec, &cfg).map_err(runtime)?;

    let ch = analytic.channels();
    let errs: Vec<f64> = analytic
        .data()
        .chunks(ch)
        .zip(reference.data().chunks(ch))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect();
    let max_abs_err = errs.iter().cloned().fold(0.0, f64::max);
    if let Some(path) = &args.error_map {
        let scale = if max_abs_err > 0.0 { 1.0 / max_abs_err } else { 0.0 };
        let map = ImageBuffer::new(spec.width, spec.height, 1, errs.iter().map(|e| e * scale).collect())
            .map_err(runtime)?;
        write_image(&map, path)?;
        write_manifest("verify-aa", args, g, &[&args.field], &[path])?;
    }
    let outcome = AaOutcome {
        max_abs_err,
        threshold: args.threshold,
    };
    println!(
        "verify-aa: t0={} delta_t={} {}x{} max_abs_err={:.3e} threshold={:.1e} {}",
        args.t0,
        args.delta_t,
        spec.width,
        spec.height,
        max_abs_err,
        args.threshold,
        if outcome.passed() { "PASS" } else { "FAIL" }
    );
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatOutcome {
    pub samples: usize,
    /// Largest `|residual| / (|∂Φ/∂t| + |κ∇²Φ| + 1)` seen.
    pub worst_ratio: f64,
    pub tolerance: f64,
}

impl HeatOutcome {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= self.tolerance
    }
}

fn random_field(rng: &mut ChaCha8Rng) -> heatfield::Result<HeatField> {
    let c = rng.random_range(1..=32);
    let channels = rng.random_range(1..=3);
    let band = 2.0 * std::f64::consts::PI * 32.0;
    let waves = (0..c)
        .map(|_| [rng.random_range(-band..band), rng.random_range(-band..band)])
        .collect();
    let kappa = 10f64.powf(rng.random_range(-6.0..-1.0));
    let params = FieldParams::new(
        channels,
        (0..c).map(|_| rng.random_range(-3.2..3.2)).collect(),
        (0..c * channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..channels).map(|_| rng.random_range(0.0..1.0)).collect(),
        kappa,
    )?;
    HeatField::new(WaveBank::new(waves)?, params)
}

/// Largest normalized heat residual over `samples` fuzzed points. Without a
/// field file a fresh random field is drawn every 100 points.
pub fn cmd_verify_heat(args: &VerifyHeatArgs, g: &Globals) -> CliResult<HeatOutcome> {
    if args.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let given = args.field.as_deref().map(read_field).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut worst: f64 = 0.0;
    let mut field = None;
    for k in 0..args.samples {
        if given.is_none() && k % 100 == 0 {
            field = Some(random_field(&mut rng).map_err(runtime)?);
        }
        let f = given.as_ref().map(|f| &f.field).or(field.as_ref()).expect("field chosen above");
        let p = EvalPoint::new(
            [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
            rng.random_range(0.0..4.0),
        )
        .map_err(runtime)?;
        let view = f.view();
        let dt = view.time_derivative(&p);
        let lap = view.laplacian(&p);
        for ((r, d), l) in view.heat_residual(&p).iter().zip(&dt).zip(&lap) {
            worst = worst.max(r.abs() / (d.abs() + (f.kappa() * l).abs() + 1.0));
        }
    }
    let outcome = HeatOutcome {
        samples: args.samples,
        worst_ratio: worst,
        tolerance: args.tolerance,
    };
    println!(
        "verify-heat: samples={} worst={:.3e} tolerance={:.1e} {}",
        outcome.samples,
        worst,
        args.tolerance,
        if outcome.passed() { "PASS" } else { "FAIL" }
    );
    Ok(outcome)
}

/// Normalized log-magnitude spectrum (of luma for colour input).
pub fn cmd_spectrum(args: &SpectrumArgs, g: &Globals) -> CliResult<ImageBuffer> {
    let img = read_image(&args.image)?;
    let gray = if img.channels() == 3 { luma(&img).map_err(runtime)? } else { img };
    let spectrum = normalized_log_spectrum(&dft_spectrum(&gray).map_err(runtime)?).map_err(runtime)?;
    write_image(&spectrum, &args.out)?;
    write_manifest("spectrum", args, g, &[&args.image], &[&args.out])?;
    println!("spectrum: {}x{} -> {}", spectrum.width(), spectrum.height(), args.out.display());
    Ok(spectrum)
}

/// Gradient magnitude scaled to its maximum.
pub fn cmd_gradmap(args: &GradmapArgs, g: &Globals) -> CliResult<ImageBuffer> {
    if !(args.time >= 0.0) {
        return Err(usage(format!("--time must be >= 0, got {}", args.time)));
    }
    let file = read_field(&args.field)?;
    let spec = native_spec(&file, size_of(args.width, args.height), args.time)?;
    let map = gradient_map(&file.field, &spec, GradientMode::Magnitude).map_err(runtime)?;
    let peak = map.data().iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let normalized = ImageBuffer::new(map.width(), map.height(), 1, map.data().iter().map(|v| v * scale).collect())
        .map_err(runtime)?;
    write_image(&normalized, &args.out)?;
    write_manifest("gradmap", args, g, &[&args.field], &[&args.out])?;
    println!("gradmap: peak |grad|={peak:.4} -> {}", args.out.display());
    Ok(map)
}

const SUBCOMMANDS: [&str; 7] = [
    "fit",
    "fit-local",
    "resample",
    "verify-aa",
    "verify-heat",
    "spectrum",
    "gradmap",
];
const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--config", "--threads", "--seed"];

/// Turn `key=value` lines into long flags. Blank lines and `#` comments are
/// skipped; `true`/`false` switch boolean flags.
pub fn config_flags(text: &str) -> CliResult<Vec<OsString>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value", no + 1)))?;
        let (key, value) = (key.trim().trim_start_matches("--"), value.trim());
        if key == "config" {
            return Err(usage("config files cannot include other config files"));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => out.push(format!("--{key}={v}").into()),
        }
    }
    Ok(out)
}

/// Splice the flags of any `--config` file in front of the command-line
/// flags of the subcommand, so explicit flags override the file.
pub fn expand_config(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
        } else if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if GLOBAL_VALUE_FLAGS.contains(&arg.as_ref()) {
            i += 1;
        } else if sub.is_none() && SUBCOMMANDS.contains(&arg.as_ref()) {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (config, sub) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = argv[..=sub].to_vec();
    out.extend(config_flags(&text)?);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = Globals {
        seed: cli.seed,
        threads: cli.threads,
    };
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, &g).map(drop),
        Command::FitLocal(a) => cmd_fit_local(a, &g).map(drop),
        Command::Resample(a) => cmd_resample(a, &g).map(drop),
        Command::VerifyAa(a) => {
            let o = cmd_verify_aa(a, &g)?;
            if o.passed() {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "max abs error {:.3e} exceeds {:.1e}",
                    o.max_abs_err, o.threshold
                )))
            }
        }
        Command::VerifyHeat(a) => {
            let o = cmd_verify_heat(a, &g)?;
            if o.passed() {
                Ok(())
            } else {
                Err(CliError::Failed(format!(
                    "heat residual ratio {:.3e} exceeds {:.1e}",
                    o.worst_ratio, o.tolerance
                )))
            }
        }
        Command::Spectrum(a) => cmd_spectrum(a, &g).map(drop),
        Command::Gradmap(a) => cmd_gradmap(a, &g).map(drop),
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let result = expand_config(argv).and_then(|argv| {
        let cli = match Cli::try_parse_from(argv) {
            Ok(cli) => cli,
            Err(e) => {
                let _ = e.print();
                // help and version requests are not errors
                return if e.use_stderr() { Err(usage("")) } else { Ok(None) };
            }
        };
        if cli.threads == 0 {
            return Err(usage("--threads must be positive"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .context("building thread pool")?;
        pool.install(|| dispatch(&cli)).map(Some)
    });
    match result {
        Ok(_) => 0,
        Err(e) => {
            if !matches!(&e, CliError::Usage(m) if m.is_empty()) {
                eprintln!("{e}");
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_lines_become_flags() {
        let flags = config_flags("# comment\nsteps = 10\n\ntrain-waves=true\ntrain-kappa=false\n").unwrap();
        assert_eq!(flags, os(&["--steps=10", "--train-waves"]));
        assert!(config_flags("no equals sign").is_err());
    }

    #[test]
    fn config_is_spliced_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "steps=10\nlr=0.5\n").unwrap();
        let argv = os(&["heatfield", "--config", cfg.to_str().unwrap(), "fit", "in.png", "--lr", "0.1"]);
        let expanded = expand_config(argv).unwrap();
        let cli = Cli::try_parse_from(expanded).unwrap();
        let Command::Fit(a) = cli.command else { panic!() };
        assert_eq!(a.steps, 10);
        assert_eq!(a.lr, 0.1);
    }

    #[test]
    fn scale_and_time_are_exclusive() {
        assert!(Cli::try_parse_from(["heatfield", "resample", "f.nhf", "-o", "x.png"]).is_err());
        assert!(Cli::try_parse_from(["heatfield", "resample", "f.nhf", "--scale", "2", "--time", "4", "-o", "x.png"]).is_err());
        assert!(Cli::try_parse_from(["heatfield", "resample", "f.nhf", "--scale", "2", "-o", "x.png"]).is_ok());
        assert_eq!(observation_time(Some(4.0), None).unwrap(), 16.0);
        assert!(observation_time(Some(-1.0), None).is_err());
    }

    #[test]
    fn targets_parse() {
        assert_eq!(parse_target("2.5:a/b.png").unwrap(), (2.5, PathBuf::from("a/b.png")));
        assert!(parse_target("a.png").is_err());
        assert!(parse_target("x:a.png").is_err());
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(manifest_path(Path::new("out/f.nhf")), PathBuf::from("out/f.nhf.manifest.json"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["heatfield", "fit"]), 2);
        assert_eq!(run(["heatfield", "fit", "/nonexistent/input.png"]), 2);
        assert_eq!(run(["heatfield", "--threads", "0", "verify-heat", "--samples", "1"]), 2);
        assert_eq!(run(["heatfield", "verify-heat", "--samples", "200"]), 0);
        assert_eq!(run(["heatfield", "verify-heat", "--samples", "200", "--tolerance", "1e-30"]), 1);
    }
}
