//! Command-line front end. [`run`] parses arguments, dispatches and returns
//! the process exit code: 0 on success, 1 on failed checks or runtime errors,
//! 2 on usage/configuration errors or missing inputs, 3 on a non-finite
//! gradient during training.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha1::{Digest, Sha1};

use crate::data::{read_dataset, render_ellipse, to_unit, write_dataset, generate_dataset, CorrConfig, FactorSpec, NUM_FACTORS};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::metric::{metric_score, FactorOracle, FactorSource, MetricConfig, MetricResult};
use crate::nn::{AdamConfig, Checkpoint};
use crate::trainer::{sample_images, traverse, write_file, ModelKind, SampleMode, TrainConfig, Trainer};
use crate::linalg::SpdMatrix;
use crate::validation::{dataset_independence, run_suite, Level, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Manifest keys with this prefix are run metadata and are skipped when the
/// manifest is fed back as a config file.
const RUN_PREFIX: &str = "run.";

#[derive(Debug, Parser)]
#[command(name = "chyvae", version, about = "Covariance-hyperprior VAE toolkit", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a CorrelatedEllipses dataset file.
    GenerateData(GenerateArgs),
    /// Train a model, writing a CSV log, checkpoints and a manifest.
    Train(TrainArgs),
    /// Score a checkpoint with the majority-vote disentanglement metric.
    EvalMetric(EvalArgs),
    /// Decode a sweep over one latent dimension into a PGM strip.
    Traverse(TraverseArgs),
    /// Decode prior samples into PGM files.
    Sample(SampleArgs),
    /// Run the numerical self-check suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 0.7)]
    pub rho_pos: f64,
    #[arg(long, default_value_t = 0.7)]
    pub rho_so: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "chyvae")]
    pub model: String,
    #[arg(long, default_value_t = 500.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "512,256")]
    pub hidden: String,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "L", default_value_t = 50)]
    pub l: usize,
    #[arg(long = "M", default_value_t = 1000)]
    pub m: usize,
    #[arg(long = "B", default_value_t = 200)]
    pub b: usize,
    #[arg(long = "N", default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.7)]
    pub rho_pos: f64,
    #[arg(long, default_value_t = 0.7)]
    pub rho_so: f64,
    /// Image height; defaults to the square root of the model input size.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Score the exact-factor encoder instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dim: usize,
    /// `start:end:count`, evenly spaced and inclusive.
    #[arg(long, default_value = "-2:2:7", allow_hyphen_values = true)]
    pub grid: String,
    /// Dataset holding the base image; without it a centred ellipse is rendered.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value = "traverse.pgm")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "bartlett")]
    pub mode: String,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value = "samples")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value = "quick")]
    pub level: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check that this dataset's factors are independent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, hide = true, allow_hyphen_values = true)]
    pub tamper_kl_constant: f64,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match splice_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFiniteGradient(_) => EXIT_NON_FINITE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Replaces `--config <file>` with the file's `key value` lines as flags,
/// placed right after the subcommand so explicit flags override them.
pub fn splice_config(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let arg = args.remove(pos).to_string_lossy().into_owned();
    let path = match arg.strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => {
            if pos >= args.len() {
                return Err(Error::Config("--config needs a file path".into()));
            }
            args.remove(pos).to_string_lossy().into_owned()
        }
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config '{path}': {e}")))?;
    let injected = parse_config(&text)?;
    let at = 2.min(args.len());
    args.splice(at..at, injected.into_iter().map(OsString::from));
    Ok(args)
}

/// `key value` lines to `--key value` flags. Blank lines and `#` comments are
/// skipped, as are `run.*` keys. A value of `true` yields a bare switch and
/// `false` drops the key.
pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = match line.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => (line, ""),
        };
        if key.starts_with(RUN_PREFIX) {
            continue;
        }
        if key.starts_with('-') {
            return Err(Error::Config(format!("config line {}: write keys without dashes", no + 1)));
        }
        match value {
            "" | "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Plain-text `key value` record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, |w| {
            for (k, v) in &self.entries {
                writeln!(w, "{k} {v}")?;
            }
            Ok(())
        })
    }
}

/// Git-style blob hash: SHA-1 of `"blob <len>\0"` followed by the content.
pub fn blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha1(path: &Path) -> Result<String> {
    Ok(blob_sha1(&std::fs::read(path)?))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Binary PGM (P5), 8-bit, with `v ∈ [0, 1]` mapped to `round(255·v)`.
pub fn encode_pgm(height: usize, width: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::dims(height * width, pixels.len()));
    }
    std::fs::write(path, encode_pgm(height, width, pixels))?;
    Ok(())
}

/// `start:end:count` into `count` evenly spaced values including both ends.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid '{s}' must look like start:end:count"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad hidden width '{t}'"))))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint '{}' not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Image size from explicit flags, or the square root of the model input size.
fn image_shape(input_dim: usize, height: Option<usize>, width: Option<usize>) -> Result<(usize, usize)> {
    let (h, w) = match (height, width) {
        (Some(h), Some(w)) => (h, w),
        (Some(h), None) => (h, input_dim / h.max(1)),
        (None, Some(w)) => (input_dim / w.max(1), w),
        (None, None) => {
            let s = (input_dim as f64).sqrt().round() as usize;
            (s, s)
        }
    };
    if h * w != input_dim {
        return Err(Error::Config(format!("image {h}x{w} does not match model input size {input_dim}")));
    }
    Ok((h, w))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::EvalMetric(a) => eval_metric(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Check(a) => check(a),
    }
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn generate(a: GenerateArgs) -> Result<i32> {
    let start = unix_time();
    let cfg = CorrConfig::new(a.rho_pos, a.rho_so).map_err(|e| Error::Config(e.to_string()))?;
    if a.n == 0 || a.height == 0 || a.width == 0 {
        return Err(Error::Config("n, height and width must be positive".into()));
    }
    let ds = generate_dataset(a.n, &cfg, &FactorSpec::default(), a.height, a.width, a.seed)?;
    write_dataset(&ds, &a.out)?;
    let mut m = RunManifest::default();
    m.push("n", a.n);
    m.push("height", a.height);
    m.push("width", a.width);
    m.push("rho-pos", a.rho_pos);
    m.push("rho-so", a.rho_so);
    m.push("seed", a.seed);
    m.push("out", a.out.display());
    m.push("run.command", "generate-data");
    m.push("run.start", start);
    m.push("run.end", unix_time());
    m.push("run.data_sha1", file_sha1(&a.out)?);
    let mpath = manifest_path_for(&a.out);
    m.push("run.manifest", mpath.display());
    m.write(&mpath)?;
    println!("wrote {} images to {}", a.n, a.out.display());
    Ok(EXIT_OK)
}

fn train(a: TrainArgs) -> Result<i32> {
    let start = unix_time();
    let model = ModelKind::parse(&a.model)?;
    let hidden = parse_hidden(&a.hidden)?;
    let config = TrainConfig {
        model,
        nu: a.nu,
        beta: a.beta,
        sigma0: SpdMatrix::identity(a.latent_dim.max(1)),
        latent_dim: a.latent_dim,
        hidden,
        batch_size: a.batch_size,
        steps: a.steps,
        eval_interval: a.eval_interval,
        seed: a.seed,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
    };
    config.validate()?;
    if !a.data.exists() {
        return Err(Error::Config(format!("dataset '{}' not found", a.data.display())));
    }
    let data = read_dataset(&a.data)?;
    let data_sha1 = file_sha1(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(config.clone(), &data, load_checkpoint(p)?)?,
        None => Trainer::new(config.clone(), &data)?,
    };

    let mut m = RunManifest::default();
    m.push("model", model.as_str());
    m.push("nu", format!("{:?}", a.nu));
    m.push("beta", format!("{:?}", a.beta));
    m.push("data", a.data.display());
    m.push("steps", a.steps);
    m.push("seed", a.seed);
    m.push("out-dir", a.out_dir.display());
    m.push("latent-dim", a.latent_dim);
    m.push("hidden", &a.hidden);
    m.push("batch-size", a.batch_size);
    m.push("eval-interval", a.eval_interval);
    m.push("lr", format!("{:?}", a.lr));
    if let Some(r) = &a.resume {
        m.push("resume", r.display());
    }
    m.push("run.command", "train");
    m.push("run.start", start);
    m.push("run.data_sha1", data_sha1);

    let result = trainer.run(Some(&a.out_dir));
    m.push("run.end", unix_time());
    m.push("run.steps_completed", trainer.step_count());
    m.push("run.log", a.out_dir.join("train_log.csv").display());
    match &result {
        Ok(()) => {
            m.push("run.status", "ok");
            m.push("run.checkpoint", crate::trainer::checkpoint_path(&a.out_dir, None).display());
        }
        Err(e) => m.push("run.status", format!("failed: {e}")),
    }
    m.write(&a.out_dir.join("manifest.txt"))?;
    result?;
    if let Some(last) = trainer.log().last() {
        println!("step {} recon/pixel {:.5} total {:.4}", last.step, last.recon_per_pixel, last.total);
    }
    Ok(EXIT_OK)
}

fn write_metric(out_dir: &Path, r: &MetricResult, cfg: &MetricConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("metric.csv"), |w| {
        writeln!(w, "score,L,M,B,N,seed")?;
        writeln!(w, "{:?},{},{},{},{},{}", r.score, cfg.l, cfg.m, cfg.b, cfg.n, seed)
    })?;
    std::fs::write(out_dir.join("votes.csv"), r.votes.to_csv())?;
    Ok(())
}

fn eval_metric(a: EvalArgs) -> Result<i32> {
    let cfg = MetricConfig { l: a.l, m: a.m, b: a.b, n: a.n };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let corr = CorrConfig::new(a.rho_pos, a.rho_so).map_err(|e| Error::Config(e.to_string()))?;
    let spec = FactorSpec::default();
    let rng = RngStream::new(a.seed);
    let result = if a.oracle {
        let src = FactorSource { cfg: corr, spec: spec.clone(), height: a.height.unwrap_or(32), width: a.width.unwrap_or(32) };
        metric_score(&mut FactorOracle::new(spec), &cfg, &src, &rng)?
    } else {
        let ck = load_checkpoint(a.ckpt.as_deref().expect("clap requires --ckpt without --oracle"))?;
        let mut params = ck.params;
        let (height, width) = image_shape(params.config().input_dim, a.height, a.width)?;
        let src = FactorSource { cfg: corr, spec, height, width };
        metric_score(&mut params, &cfg, &src, &rng)?
    };
    write_metric(&a.out_dir, &result, &cfg, a.seed)?;
    println!("score {:.4}", result.score);
    Ok(EXIT_OK)
}

fn traverse_cmd(a: TraverseArgs) -> Result<i32> {
    let grid = parse_grid(&a.grid)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (height, width) = image_shape(ck.params.config().input_dim, a.height, a.width)?;
    let base: Vec<f64> = match &a.data {
        Some(path) => {
            let ds = read_dataset(path)?;
            if a.index >= ds.len() {
                return Err(Error::Config(format!("index {} out of range for {} images", a.index, ds.len())));
            }
            if (ds.height, ds.width) != (height, width) {
                return Err(Error::Config("dataset image size does not match the model".into()));
            }
            ds.image(a.index).iter().map(|&p| to_unit(p)).collect()
        }
        None => {
            let spec = FactorSpec::default();
            let mid: [u16; NUM_FACTORS] = std::array::from_fn(|k| (spec.table(k).len() / 2) as u16);
            render_ellipse(&mid, &spec, height, width)?.into_iter().map(to_unit).collect()
        }
    };
    let strip = traverse(&ck.params, &base, a.dim, &grid, height, width).map_err(|e| match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    })?;
    write_pgm(&a.out, strip.height, strip.width, &strip.pixels)?;
    println!("wrote {} tiles to {}", strip.tiles, a.out.display());
    Ok(EXIT_OK)
}

fn sample(a: SampleArgs) -> Result<i32> {
    let mode = SampleMode::parse(&a.mode)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let (height, width) = image_shape(ck.params.config().input_dim, a.height, a.width)?;
    let hp = match mode {
        SampleMode::Bartlett => {
            let cfg = TrainConfig::from_checkpoint(&ck)?;
            if cfg.model != ModelKind::Chyvae {
                return Err(Error::Config("bartlett sampling needs a chyvae checkpoint".into()));
            }
            Some(cfg.hyperprior()?)
        }
        SampleMode::StandardNormal => None,
    };
    let images = sample_images(&ck.params, hp.as_ref(), a.n, mode, &mut RngStream::new(a.seed))?;
    std::fs::create_dir_all(&a.out_dir)?;
    let d = height * width;
    for (i, img) in images.chunks_exact(d).enumerate() {
        write_pgm(&a.out_dir.join(format!("sample_{i:03}.pgm")), height, width, img)?;
    }
    println!("wrote {} samples to {}", a.n, a.out_dir.display());
    Ok(EXIT_OK)
}

fn check(a: CheckArgs) -> Result<i32> {
    let level = Level::parse(&a.level).ok_or_else(|| Error::Config(format!("unknown level '{}'", a.level)))?;
    let opts = SuiteOptions { level, seed: a.seed, tamper_kl_constant: a.tamper_kl_constant };
    let mut outcomes = run_suite(&opts);
    if let Some(path) = &a.data {
        if !path.exists() {
            return Err(Error::Config(format!("dataset '{}' not found", path.display())));
        }
        outcomes.push(dataset_independence(&read_dataset(path)?));
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {} failed", outcomes.len() - failed, failed);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}
