//! `shiftcodec` command-line front end.
//!
//! Failures print one `error[<kind>]: <message>` line to stderr and exit
//! nonzero. Input files are never modified.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use shiftcodec::analysis::{self, bd, ComplexityReport, Interp, RdCurve};
use shiftcodec::checkpoint::load_checkpoint;
use shiftcodec::entropy::bitstream::Bitstream;
use shiftcodec::entropy::codec::{decode_image, encode_image};
use shiftcodec::image::Rgb8;
use shiftcodec::net::{Ablation, Model, ModelConfig};
use shiftcodec::train::{self, metrics, Dataset, Distortion, TrainConfig, TrainOutputs};

pub const SEED_ENV: &str = "SHIFTLIC_SEED";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] shiftcodec::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
        }
    }
}

impl From<shiftcodec::error::AnalysisError> for CliError {
    fn from(e: shiftcodec::error::AnalysisError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<shiftcodec::error::BitstreamError> for CliError {
    fn from(e: shiftcodec::error::BitstreamError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<shiftcodec::error::TensorError> for CliError {
    fn from(e: shiftcodec::error::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<shiftcodec::error::ImageError> for CliError {
    fn from(e: shiftcodec::error::ImageError) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "shiftcodec", version, about = "Shift-based learned image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a per-step loss CSV.
    Train(TrainArgs),
    /// Compress a PPM image.
    Encode(EncodeArgs),
    /// Reconstruct a PPM image from a bitstream.
    Decode(DecodeArgs),
    /// Encode and decode every PPM in a folder and report RD averages.
    Eval(EvalArgs),
    /// Per-layer parameter and multiply counts against the closed forms.
    Analyze(AnalyzeArgs),
    /// Exact closed-form cost of one building block.
    Formula(FormulaArgs),
    /// BD-rate of a test curve against an anchor curve.
    Bdrate(BdrateArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Preset: small, medium, tiny or desk-medium.
    #[arg(long)]
    config: Option<String>,
    /// Config override as a dotted `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ablation variant case1..case6.
    #[arg(long)]
    ablation: Option<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty() || self.ablation.is_some()
    }

    fn resolve(&self, default: &str) -> Result<ModelConfig> {
        let name = self.config.as_deref().unwrap_or(default);
        let mut cfg = ModelConfig::preset(name).ok_or_else(|| CliError::Usage(format!("unknown config `{name}`")))?;
        if let Some(a) = &self.ablation {
            let a = Ablation::parse(a).ok_or_else(|| CliError::Usage(format!("unknown ablation `{a}`")))?;
            cfg = cfg.ablate(a);
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistortionArg {
    Mse,
    MsSsim,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Recipe {
    Desk,
    Full,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Loss CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train on crops of this single image.
    #[arg(long, conflicts_with = "data")]
    overfit: Option<PathBuf>,
    /// Folder of PPM training images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Procedural textures used when no images are given.
    #[arg(long, default_value_t = 16)]
    textures: usize,
    #[arg(long, value_enum, default_value_t = Recipe::Desk)]
    recipe: Recipe,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Index into the λ set of the chosen distortion.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(0..=6))]
    lambda_index: u8,
    /// Explicit λ; overrides the indexed value.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = DistortionArg::Mse)]
    distortion: DistortionArg,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Disable random cyclic translation of patches.
    #[arg(long)]
    no_roll: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    input: PathBuf,
    #[arg(long, short = 'm')]
    checkpoint: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(long, short = 'm')]
    checkpoint: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Original image; prints PSNR of the reconstruction against it.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    folder: PathBuf,
    #[arg(long, short = 'm')]
    checkpoint: PathBuf,
    #[arg(long, default_value = "eval.csv")]
    csv: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input size as WIDTHxHEIGHT.
    #[arg(long, default_value = "768x512", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value = "complexity.csv")]
    csv: PathBuf,
    /// BD-rate in percent; adds the BD-rate per multiply figure.
    #[arg(long, allow_hyphen_values = true)]
    bd_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct FormulaArgs {
    /// resblock, ssb, attention, nonlocal or cra.
    entry: String,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value = "1x1", value_parser = parse_size)]
    size: (usize, usize),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InterpArg {
    Cubic,
    Pchip,
}

#[derive(Debug, Args)]
struct BdrateArgs {
    /// CSV of `bpp,quality_db` lines.
    anchor: PathBuf,
    test: PathBuf,
    #[arg(long, value_enum, default_value_t = InterpArg::Cubic)]
    interp: InterpArg,
    #[arg(long, default_value = "bdrate.csv")]
    csv: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not WIDTHxHEIGHT"))?;
    let p = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (p(w), p(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("`{s}` is not WIDTHxHEIGHT")),
    }
}

/// Flag, then environment, then zero.
fn seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Writes via a sibling temporary so a failed run leaves no partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_model(path: &Path, requested: Option<ModelConfig>) -> Result<(Model<f32>, u8)> {
    let (model, li) = load_checkpoint::<f32>(path)?;
    if let Some(cfg) = requested {
        if cfg.fingerprint() != model.config.fingerprint() || cfg != model.config {
            return Err(shiftcodec::Error::Config(format!(
                "checkpoint config id {:#04x} does not match requested config id {:#04x}",
                model.config.fingerprint(),
                cfg.fingerprint()
            ))
            .into());
        }
    }
    Ok((model, li))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve("tiny")?;
    let seed = seed(a.seed)?;
    let distortion = match a.distortion {
        DistortionArg::Mse => Distortion::Mse,
        DistortionArg::MsSsim => Distortion::MsSsim,
    };
    let lambda = a.lambda.unwrap_or(distortion.lambdas()[a.lambda_index as usize]);
    let mut tc = match a.recipe {
        Recipe::Desk => TrainConfig::desk(lambda, a.steps),
        Recipe::Full => TrainConfig {
            max_steps: Some(a.steps),
            ..TrainConfig::full(lambda)
        },
    };
    tc.distortion = distortion;
    tc.seed = seed;
    if let Some(lr) = a.lr {
        tc.lr_schedule = vec![(0, lr)];
    }
    if let Some(p) = a.patch {
        tc.patch = p;
    }
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    if a.no_roll {
        tc.roll = false;
    }
    let data = if let Some(p) = &a.overfit {
        Dataset::single(Rgb8::read(p)?.to_tensor())
    } else if let Some(d) = &a.data {
        Dataset::from_folder(d)?
    } else {
        Dataset::procedural(a.textures, tc.patch.max(64), seed)
    };
    let csv = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut model = Model::<f32>::new(cfg, seed)?;
    let out = TrainOutputs {
        csv: Some(csv.clone()),
        checkpoint: Some(a.out.clone()),
        lambda_index: a.lambda_index,
    };
    let t0 = Instant::now();
    let report = train::train_loop(&mut model, &data, &tc, &out)?;
    let last = report.log.last();
    println!(
        "trained {} steps in {:.1} s: loss {:.4} -> {:.4}, rate {:.4} bpp, distortion {:.3}; checkpoint {}; log {}",
        report.log.len(),
        t0.elapsed().as_secs_f64(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
        last.map_or(f64::NAN, |s| s.rate),
        last.map_or(f64::NAN, |s| s.distortion),
        a.out.display(),
        csv.display()
    );
    Ok(())
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let requested = if a.config.given() { Some(a.config.resolve("tiny")?) } else { None };
    let img = Rgb8::read(&a.input)?;
    let (model, li) = load_model(&a.checkpoint, requested)?;
    let t0 = Instant::now();
    let enc = encode_image(&model, &img.to_tensor::<f32>(), li)?;
    let bytes = enc.stream.to_bytes();
    let secs = t0.elapsed().as_secs_f64();
    write_atomic(&a.out, &bytes)?;
    let bpp = 8.0 * bytes.len() as f64 / (img.width * img.height) as f64;
    println!(
        "encoded {}x{} to {}: {} bytes, {:.4} bpp, {:.1} ms",
        img.width,
        img.height,
        a.out.display(),
        bytes.len(),
        bpp,
        secs * 1e3
    );
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input)?;
    let stream = Bitstream::parse(&bytes)?;
    let (model, _) = load_model(&a.checkpoint, None)?;
    let t0 = Instant::now();
    let dec = decode_image(&model, &stream)?;
    let secs = t0.elapsed().as_secs_f64();
    let rec = Rgb8::from_tensor(&dec.x_hat)?;
    let psnr = match &a.reference {
        Some(r) => {
            let reference = Rgb8::read(r)?;
            if (reference.width, reference.height) != (rec.width, rec.height) {
                return Err(CliError::Usage(format!(
                    "reference is {}x{}, reconstruction is {}x{}",
                    reference.width, reference.height, rec.width, rec.height
                )));
            }
            Some(metrics::psnr(&reference.to_tensor::<f64>(), &rec.to_tensor::<f64>())?)
        }
        None => None,
    };
    write_atomic(&a.out, &rec.to_ppm())?;
    let mut line = format!("decoded {}x{} to {} in {:.1} ms", rec.width, rec.height, a.out.display(), secs * 1e3);
    if let Some(p) = psnr {
        line.push_str(&format!(", PSNR {p:.4} dB"));
    }
    println!("{line}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, li) = load_model(&a.checkpoint, None)?;
    let report = analysis::eval_dataset(&model, &a.folder, li)?;
    std::fs::write(&a.csv, report.to_csv())?;
    let m = report.mean;
    println!(
        "evaluated {} of {} images: {:.4} bpp, {:.4} dB PSNR, {:.5} MS-SSIM ({:.3} dB); csv {}",
        report.scored(),
        report.rows.len(),
        m.bpp,
        m.psnr_db,
        m.msssim,
        m.msssim_db,
        a.csv.display()
    );
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let cfg = a.config.resolve("medium")?;
    let (w, h) = a.size;
    let k = cfg.pad_multiple();
    if h % k != 0 || w % k != 0 {
        return Err(CliError::Usage(format!("size {w}x{h} must be a multiple of {k} for this config")));
    }
    let model = Model::<f32>::new(cfg, 0)?;
    let report: ComplexityReport = analysis::count_model(&model, h, w);
    std::fs::write(&a.csv, report.to_csv())?;
    print!("{}", report.to_table());
    let mut line = format!(
        "params {:.3}M, {:.2} KMACs/pixel; csv {}",
        report.totals.total_params() as f64 / 1e6,
        report.kmacs_per_pixel(),
        a.csv.display()
    );
    if let Some(bd) = a.bd_rate {
        line.push_str(&format!(", BD-rate/FLOPs {:.6e}", report.bd_rate_per_flops(bd)));
    }
    println!("{line}");
    Ok(())
}

fn cmd_formula(a: &FormulaArgs) -> Result<()> {
    let (w, h) = a.size;
    let (p, f) = analysis::closed_form(&a.entry, a.m, a.n, h as u64, w as u64)?;
    println!(
        "{} M={} N={} at {}x{}: params {}, flops {}",
        a.entry,
        a.m,
        a.n,
        w,
        h,
        analysis::complexity::fmt_q(p),
        analysis::complexity::fmt_q(f)
    );
    Ok(())
}

fn cmd_bdrate(a: &BdrateArgs) -> Result<()> {
    let anchor = RdCurve::read(&a.anchor)?;
    let test = RdCurve::read(&a.test)?;
    let interp = match a.interp {
        InterpArg::Cubic => Interp::Cubic,
        InterpArg::Pchip => Interp::Pchip,
    };
    let v = bd::bd_rate_with(&anchor, &test, interp)?;
    std::fs::write(
        &a.csv,
        format!("anchor,test,interp,bd_rate_pct\n{},{},{:?},{v:.6}\n", a.anchor.display(), a.test.display(), interp),
    )?;
    println!("BD-rate {v:.2}%; csv {}", a.csv.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Formula(a) => cmd_formula(a),
        Cmd::Bdrate(a) => cmd_bdrate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let body = msg.split("\n\nUsage:").next().unwrap_or_default();
            let body = body.split("\n\nFor more information").next().unwrap_or_default();
            let line = body.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
