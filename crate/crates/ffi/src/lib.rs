//! C ABI over `chyvae`.
//!
//! Objects cross the boundary as opaque handles created by `*_generate`,
//! `*_load` or `chyvae_train` and released with the matching `*_free`.
//! Every fallible function returns a [`ChyvaeStatus`]; on failure the message
//! is available from [`chyvae_last_error_message`] until the next failing
//! call on the same thread. Output buffers are caller-allocated and their
//! lengths are checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use chyvae::data::{generate_dataset, read_dataset, to_unit, write_dataset, CorrConfig, EllipseDataset, FactorSpec, NUM_FACTORS};
use chyvae::distributions::{iw_kl, iw_sample_bartlett, HyperpriorParams, RngStream};
use chyvae::linalg::SpdMatrix;
use chyvae::metric::{metric_score, FactorSource, MetricConfig};
use chyvae::nn::{decode_batch, encode_means, AdamConfig, Checkpoint};
use chyvae::trainer::{ModelKind, TrainConfig, Trainer};
use chyvae::Error;

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChyvaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    NotPositiveDefinite = 4,
    DimensionMismatch = 5,
    NonFiniteGradient = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChyvaeModelKind {
    Chyvae = 0,
    BetaVae = 1,
}

/// Training settings. Obtain defaults from [`chyvae_train_config_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ChyvaeTrainConfig {
    pub model: ChyvaeModelKind,
    pub nu: f64,
    pub beta: f64,
    pub latent_dim: usize,
    /// Hidden widths; null keeps the default `{512, 256}`.
    pub hidden: *const usize,
    pub hidden_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub learning_rate: f64,
}

/// Opaque image dataset.
pub struct ChyvaeDataset(EllipseDataset);

/// Opaque trained model (parameters plus the training configuration echo).
pub struct ChyvaeModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ChyvaeStatus {
    match e {
        Error::NotPositiveDefinite { .. } => ChyvaeStatus::NotPositiveDefinite,
        Error::Domain(_) => ChyvaeStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => ChyvaeStatus::DimensionMismatch,
        Error::NotScalar(_) => ChyvaeStatus::InvalidArgument,
        Error::NonFiniteGradient(_) => ChyvaeStatus::NonFiniteGradient,
        Error::Config(_) => ChyvaeStatus::Config,
        Error::Format(_) => ChyvaeStatus::Format,
        Error::Io(_) => ChyvaeStatus::Io,
    }
}

struct Fail(ChyvaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ChyvaeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ChyvaeStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ChyvaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChyvaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            ChyvaeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < need {
        return Err(Fail(ChyvaeStatus::BufferTooSmall, format!("{what} holds {len} values, {need} needed")));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn chyvae_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chyvae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Renders `n` CorrelatedEllipses images of `height × width`.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_generate(
    n: usize,
    height: usize,
    width: usize,
    rho_pos: f64,
    rho_so: f64,
    seed: u64,
    out: *mut *mut ChyvaeDataset,
) -> ChyvaeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if height == 0 || width == 0 {
            return Err(invalid("height and width must be positive"));
        }
        let cfg = CorrConfig::new(rho_pos, rho_so)?;
        let ds = generate_dataset(n, &cfg, &FactorSpec::default(), height, width, seed)?;
        *out = Box::into_raw(Box::new(ChyvaeDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid handle storage.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_load(path: *const c_char, out: *mut *mut ChyvaeDataset) -> ChyvaeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = read_dataset(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ChyvaeDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_save(ds: *const ChyvaeDataset, path: *const c_char) -> ChyvaeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        write_dataset(&ds.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of images, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_len(ds: *const ChyvaeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Writes image height and width.
///
/// # Safety
/// `ds` must be a live dataset handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_shape(ds: *const ChyvaeDataset, height: *mut usize, width: *mut usize) -> ChyvaeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        *out_ptr(height, "height")? = ds.0.height;
        *out_ptr(width, "width")? = ds.0.width;
        Ok(())
    })
}

/// Copies image `index` into `out` as values in [0, 1] (row-major).
///
/// # Safety
/// `ds` must be a live dataset handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_image(ds: *const ChyvaeDataset, index: usize, out: *mut f64, out_len: usize) -> ChyvaeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if index >= ds.0.len() {
            return Err(invalid(format!("index {index} out of range for {} images", ds.0.len())));
        }
        let img = ds.0.image(index);
        let out = out_slice(out, out_len, img.len(), "out")?;
        for (o, p) in out.iter_mut().zip(img) {
            *o = to_unit(*p);
        }
        Ok(())
    })
}

/// Copies the four factor indices (x, y, scale, orientation) of image `index`.
///
/// # Safety
/// `ds` must be a live dataset handle and `out` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_factors(ds: *const ChyvaeDataset, index: usize, out: *mut u16) -> ChyvaeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let f = ds.0.factors.get(index).ok_or_else(|| invalid(format!("index {index} out of range")))?;
        out_slice(out, NUM_FACTORS, NUM_FACTORS, "out")?.copy_from_slice(f);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chyvae_dataset_free(ds: *mut ChyvaeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Desk-scale defaults: hyperprior model, `ν = 500`, `p = 10`, batch 50,
/// 5000 steps, learning rate `1e-4`.
#[no_mangle]
pub extern "C" fn chyvae_train_config_default() -> ChyvaeTrainConfig {
    let d = TrainConfig::default();
    ChyvaeTrainConfig {
        model: ChyvaeModelKind::Chyvae,
        nu: d.nu,
        beta: d.beta,
        latent_dim: d.latent_dim,
        hidden: std::ptr::null(),
        hidden_len: 0,
        batch_size: d.batch_size,
        steps: d.steps,
        seed: d.seed,
        learning_rate: d.adam.lr,
    }
}

unsafe fn train_config(c: &ChyvaeTrainConfig) -> Result<TrainConfig, Fail> {
    let hidden = if c.hidden.is_null() { TrainConfig::default().hidden } else { slice_arg(c.hidden, c.hidden_len, "hidden")?.to_vec() };
    if c.latent_dim == 0 {
        return Err(Fail(ChyvaeStatus::Config, "latent_dim must be positive".into()));
    }
    let cfg = TrainConfig {
        model: match c.model {
            ChyvaeModelKind::Chyvae => ModelKind::Chyvae,
            ChyvaeModelKind::BetaVae => ModelKind::BetaVae,
        },
        nu: c.nu,
        beta: c.beta,
        sigma0: SpdMatrix::identity(c.latent_dim),
        latent_dim: c.latent_dim,
        hidden,
        batch_size: c.batch_size,
        steps: c.steps,
        eval_interval: 0,
        seed: c.seed,
        adam: AdamConfig { lr: c.learning_rate, ..AdamConfig::default() },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains on `ds`. When `log_out` is non-null it receives the per-step
/// per-pixel reconstruction error; it must hold `log_len ≥ steps` doubles.
///
/// # Safety
/// All pointers must be valid for their stated use.
#[no_mangle]
pub unsafe extern "C" fn chyvae_train(
    ds: *const ChyvaeDataset,
    config: *const ChyvaeTrainConfig,
    log_out: *mut f64,
    log_len: usize,
    out: *mut *mut ChyvaeModel,
) -> ChyvaeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let cfg = train_config(handle(config, "config")?)?;
        let out = out_ptr(out, "out")?;
        let log = if log_out.is_null() { None } else { Some(out_slice(log_out, log_len, cfg.steps as usize, "log_out")?) };
        let mut t = Trainer::new(cfg, &ds.0)?;
        t.run(None)?;
        if let Some(log) = log {
            for (o, r) in log.iter_mut().zip(t.log()) {
                *o = r.recon_per_pixel;
            }
        }
        *out = Box::into_raw(Box::new(ChyvaeModel(t.checkpoint())));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid handle storage.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_load(path: *const c_char, out: *mut *mut ChyvaeModel) -> ChyvaeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ChyvaeModel(ck)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live model handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_save(model: *const ChyvaeModel, path: *const c_char) -> ChyvaeStatus {
    guard(|| {
        handle(model, "model")?.0.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Latent size `p`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_latent_dim(model: *const ChyvaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.config().latent_dim)
}

/// Pixels per image `D`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_input_dim(model: *const ChyvaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.config().input_dim)
}

/// Posterior means of `n` images (`n × D` in, `n × p` out).
///
/// # Safety
/// `images` must hold `n·D` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_encode(
    model: *const ChyvaeModel,
    images: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> ChyvaeStatus {
    guard(|| {
        let params = &handle(model, "model")?.0.params;
        let cfg = params.config();
        let xs = slice_arg(images, n * cfg.input_dim, "images")?;
        let out = out_slice(out, out_len, n * cfg.latent_dim, "out")?;
        out.copy_from_slice(&encode_means(params, xs, n)?);
        Ok(())
    })
}

/// Decoder means in (0, 1) for `n` latents (`n × p` in, `n × D` out).
///
/// # Safety
/// `latents` must hold `n·p` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_decode(
    model: *const ChyvaeModel,
    latents: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> ChyvaeStatus {
    guard(|| {
        let params = &handle(model, "model")?.0.params;
        let cfg = params.config();
        let zs = slice_arg(latents, n * cfg.latent_dim, "latents")?;
        let out = out_slice(out, out_len, n * cfg.input_dim, "out")?;
        out.copy_from_slice(&decode_batch(params, zs, n)?);
        Ok(())
    })
}

/// Majority-vote disentanglement score on freshly generated square images
/// (`ρ = 0.7` for both factor pairs).
///
/// # Safety
/// `model` must be a live model handle and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_metric_score(
    model: *const ChyvaeModel,
    l: usize,
    m: usize,
    b: usize,
    n: usize,
    seed: u64,
    score: *mut f64,
) -> ChyvaeStatus {
    guard(|| {
        let mut params = handle(model, "model")?.0.params.clone();
        let score = out_ptr(score, "score")?;
        let cfg = MetricConfig { l, m, b, n };
        cfg.validate()?;
        let d = params.config().input_dim;
        let side = (d as f64).sqrt().round() as usize;
        if side * side != d {
            return Err(invalid(format!("input size {d} is not a square image")));
        }
        let src = FactorSource { cfg: CorrConfig::default(), spec: FactorSpec::default(), height: side, width: side };
        *score = metric_score(&mut params, &cfg, &src, &RngStream::new(seed))?.score;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chyvae_model_free(model: *mut ChyvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn hyperprior(p: usize, psi: *const f64, nu: f64) -> Result<HyperpriorParams, Fail> {
    let psi = SpdMatrix::new(p, slice_arg(psi, p * p, "psi")?.to_vec())?;
    Ok(HyperpriorParams::new(psi, nu)?)
}

/// `KL(W⁻¹(Φ, λ) ‖ W⁻¹(Ψ, ν))` for row-major `p × p` scale matrices.
///
/// # Safety
/// `phi` and `psi` must hold `p·p` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn chyvae_iw_kl(
    p: usize,
    phi: *const f64,
    lambda: f64,
    psi: *const f64,
    nu: f64,
    out: *mut f64,
) -> ChyvaeStatus {
    guard(|| {
        if p == 0 {
            return Err(invalid("p must be positive"));
        }
        let out = out_ptr(out, "out")?;
        let hp = hyperprior(p, psi, nu)?;
        let phi = SpdMatrix::new(p, slice_arg(phi, p * p, "phi")?.to_vec())?;
        *out = iw_kl(&phi, lambda, &hp)?;
        Ok(())
    })
}

/// One Bartlett draw from `W⁻¹(Ψ, ν)` into `out` (row-major `p × p`).
///
/// # Safety
/// `psi` must hold `p·p` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chyvae_iw_sample(
    p: usize,
    psi: *const f64,
    nu: f64,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> ChyvaeStatus {
    guard(|| {
        if p == 0 {
            return Err(invalid("p must be positive"));
        }
        let hp = hyperprior(p, psi, nu)?;
        let out = out_slice(out, out_len, p * p, "out")?;
        out.copy_from_slice(iw_sample_bartlett(&hp, &mut RngStream::new(seed))?.as_slice());
        Ok(())
    })
}
