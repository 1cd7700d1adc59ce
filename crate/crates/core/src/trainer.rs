//! Training loop, checkpoint/resume, latent traversals and sampling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::EllipseDataset;
use crate::distributions::{iw_sample_bartlett, HyperpriorParams, RngStream};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, SpdMatrix};
use crate::losses::{evaluate_batch, ElboBreakdown, Objective};
use crate::nn::{
    adam_step, decode_batch, encoder_forward, init_params, AdamConfig, AdamState, Checkpoint, EncoderMode, ModelConfig,
    ModelParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Chyvae,
    BetaVae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Chyvae => "chyvae",
            ModelKind::BetaVae => "betavae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chyvae" => Ok(ModelKind::Chyvae),
            "betavae" => Ok(ModelKind::BetaVae),
            _ => Err(Error::Config(format!("unknown model '{s}' (expected chyvae or betavae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    /// Inverse-Wishart degrees of freedom (chyvae).
    pub nu: f64,
    /// KL weight (betavae).
    pub beta: f64,
    /// Target covariance `Σ₀`; `Ψ = (ν − p − 1)Σ₀`.
    pub sigma0: SpdMatrix,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: u64,
    /// Checkpoint every this many steps (0 disables intermediate checkpoints).
    pub eval_interval: u64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Chyvae,
            nu: 500.0,
            beta: 1.0,
            sigma0: SpdMatrix::identity(10),
            latent_dim: 10,
            hidden: vec![512, 256],
            batch_size: 50,
            steps: 5000,
            eval_interval: 1000,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.latent_dim;
        if p == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent size and batch size must be positive".into()));
        }
        if self.sigma0.dim() != p {
            return Err(Error::Config(format!("sigma0 is {0}x{0} but the latent size is {p}", self.sigma0.dim())));
        }
        match self.model {
            ModelKind::Chyvae => {
                if !(self.nu > p as f64 + 1.0) {
                    return Err(Error::Config(format!("nu = {} must exceed p + 1 = {}", self.nu, p + 1)));
                }
                cholesky(&self.sigma0).map_err(|_| Error::Config("sigma0 must be positive definite".into()))?;
            }
            ModelKind::BetaVae => {
                if !(self.beta >= 0.0 && self.beta.is_finite()) {
                    return Err(Error::Config(format!("beta = {} must be a non-negative number", self.beta)));
                }
            }
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn hyperprior(&self) -> Result<HyperpriorParams> {
        HyperpriorParams::from_target_covariance(&self.sigma0, self.nu)
    }

    pub fn objective(&self) -> Result<Objective> {
        self.validate()?;
        Ok(match self.model {
            ModelKind::Chyvae => Objective::Chyvae(self.hyperprior()?),
            ModelKind::BetaVae => Objective::BetaVae { beta: self.beta },
        })
    }

    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let mode = match self.model {
            ModelKind::Chyvae => EncoderMode::Chyvae,
            ModelKind::BetaVae => EncoderMode::Diagonal,
        };
        ModelConfig::new(input_dim, self.hidden.clone(), self.latent_dim, mode)
    }

    /// Key/value echo stored in checkpoints.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let f = |v: f64| format!("{v:?}");
        let sigma0: Vec<String> = self.sigma0.as_slice().iter().map(|v| f(*v)).collect();
        vec![
            ("model".into(), self.model.as_str().into()),
            ("nu".into(), f(self.nu)),
            ("beta".into(), f(self.beta)),
            ("sigma0".into(), sigma0.join(",")),
            ("batch_size".into(), self.batch_size.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("eval_interval".into(), self.eval_interval.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("lr".into(), f(self.adam.lr)),
            ("beta1".into(), f(self.adam.beta1)),
            ("beta2".into(), f(self.adam.beta2)),
            ("adam_eps".into(), f(self.adam.eps)),
        ]
    }

    /// Rebuilds the training configuration echoed in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| ck.meta_value(k).ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad value for '{k}'"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Format(format!("bad value for '{k}'"))) };
        let mc = ck.params.config();
        let sigma0: Vec<f64> = get("sigma0")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format("bad sigma0".into())))
            .collect::<Result<_>>()?;
        let cfg = Self {
            model: ModelKind::parse(get("model")?)?,
            nu: num("nu")?,
            beta: num("beta")?,
            sigma0: SpdMatrix::new(mc.latent_dim, sigma0).map_err(|e| Error::Format(e.to_string()))?,
            latent_dim: mc.latent_dim,
            hidden: mc.hidden.clone(),
            batch_size: int("batch_size")? as usize,
            steps: int("steps")?,
            eval_interval: int("eval_interval")?,
            seed: int("seed")?,
            adam: AdamConfig { lr: num("lr")?, beta1: num("beta1")?, beta2: num("beta2")?, eps: num("adam_eps")? },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Batch-mean negative Bernoulli log-likelihood per image.
    pub recon_sum: f64,
    /// `recon_sum` divided by the pixel count.
    pub recon_per_pixel: f64,
    pub gaussian_term: f64,
    pub iw_term: f64,
    /// Batch-mean objective (the bound being maximized).
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,recon_sum,recon_per_pixel,gaussian_term,iw_term,total";

impl LogRow {
    fn new(step: u64, e: &ElboBreakdown, pixels: usize) -> Self {
        Self {
            step,
            recon_sum: -e.recon,
            recon_per_pixel: -e.recon / pixels as f64,
            gaussian_term: e.gaussian_term,
            iw_term: e.iw_term,
            total: e.total,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.recon_sum, self.recon_per_pixel, self.gaussian_term, self.iw_term, self.total
        )
    }
}

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;

/// Training state. Batches and reparameterization noise for step `t` come
/// from streams derived from `(seed, t)`, so the state needed to resume is
/// just parameters, optimizer moments and the step counter.
pub struct Trainer<'a> {
    config: TrainConfig,
    objective: Objective,
    data: &'a EllipseDataset,
    params: ModelParams,
    adam: AdamState,
    step: u64,
    log: Vec<LogRow>,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a EllipseDataset) -> Result<Self> {
        let objective = config.objective()?;
        let mc = config.model_config(data.image_size())?;
        let params = init_params(&mc, &mut RngStream::new(config.seed).derive(INIT_STREAM));
        let adam = AdamState::for_params(&params);
        Self::assemble(config, objective, data, params, adam, 0)
    }

    pub fn resume(config: TrainConfig, data: &'a EllipseDataset, ck: Checkpoint) -> Result<Self> {
        let objective = config.objective()?;
        let mc = config.model_config(data.image_size())?;
        if &mc != ck.params.config() {
            return Err(Error::Config("checkpoint model does not match the configuration".into()));
        }
        Self::assemble(config, objective, data, ck.params, ck.adam, ck.step)
    }

    fn assemble(
        config: TrainConfig,
        objective: Objective,
        data: &'a EllipseDataset,
        params: ModelParams,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        if data.len() < config.batch_size {
            return Err(Error::Config(format!("dataset has {} images, fewer than one batch", data.len())));
        }
        Ok(Self { config, objective, data, params, adam, step, log: Vec::new(), epoch_order: None })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), adam: self.adam.clone(), step: self.step, meta: self.config.to_meta() }
    }

    /// Dataset indices for step `t`: consecutive slices of a per-epoch permutation.
    fn batch_indices(&mut self, t: u64) -> Vec<usize> {
        let b = self.config.batch_size;
        let per_epoch = (self.data.len() / b) as u64;
        let epoch = t / per_epoch;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            RngStream::new(self.config.seed).derive_path(&[SHUFFLE_STREAM, epoch]).shuffle(&mut order);
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().unwrap().1;
        let start = (t % per_epoch) as usize * b;
        order[start..start + b].to_vec()
    }

    /// Evaluates the batch objective at the current parameters, logs it, then
    /// applies one Adam update.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let t = self.step;
        let idx = self.batch_indices(t);
        let xs = self.data.batch(&idx);
        let b = idx.len();
        let eps = RngStream::new(self.config.seed).derive_path(&[NOISE_STREAM, t]).normal_vec(b * self.config.latent_dim);
        let ev = evaluate_batch(&self.params, &self.objective, &xs, b, &eps, true)?;
        if !ev.breakdown.is_finite() {
            return Err(Error::NonFiniteGradient(format!("objective is not finite at step {t}")));
        }
        let grads = ev.grads.expect("gradients requested");
        adam_step(&mut self.params, &grads, &mut self.adam, &self.config.adam)
            .map_err(|e| match e {
                Error::NonFiniteGradient(m) => Error::NonFiniteGradient(format!("step {t}: {m}")),
                other => other,
            })?;
        let row = LogRow::new(t, &ev.breakdown, self.data.image_size());
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    /// Runs until `config.steps`, streaming the log to `out_dir/train_log.csv`
    /// and writing checkpoints every `eval_interval` steps plus a final one.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let mut csv = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = self.step == 0 || !path.exists();
                let f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
                let mut w = BufWriter::new(f);
                if fresh {
                    writeln!(w, "{LOG_HEADER}")?;
                }
                Some(w)
            }
            None => None,
        };
        while self.step < self.config.steps {
            let row = self.train_step();
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    if let Some(w) = csv.as_mut() {
                        w.flush()?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", row.to_csv())?;
            }
            if let Some(dir) = out_dir {
                let iv = self.config.eval_interval;
                if iv > 0 && self.step % iv == 0 && self.step < self.config.steps {
                    self.checkpoint().save(checkpoint_path(dir, Some(self.step)))?;
                }
            }
        }
        if let Some(mut w) = csv {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(checkpoint_path(dir, None))?;
        }
        Ok(())
    }
}

/// `checkpoint_<step>.bin`, or `checkpoint.bin` for the final one.
pub fn checkpoint_path(dir: &Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("checkpoint_{s:06}.bin")),
        None => dir.join("checkpoint.bin"),
    }
}

/// Trains from scratch per `config`.
pub fn train(config: TrainConfig, data: &EllipseDataset, out_dir: Option<&Path>) -> Result<(ModelParams, Vec<LogRow>)> {
    let mut t = Trainer::new(config, data)?;
    t.run(out_dir)?;
    Ok((t.params.clone(), t.log))
}

/// Decoded tiles laid out side by side: `height × (tiles · width)` in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStrip {
    pub height: usize,
    pub width: usize,
    pub tiles: usize,
    pub pixels: Vec<f64>,
}

impl ImageStrip {
    pub fn from_tiles(height: usize, tile_width: usize, tiles: &[f64]) -> Self {
        let d = height * tile_width;
        let n = tiles.len() / d;
        let width = n * tile_width;
        let mut pixels = vec![0.0; height * width];
        for t in 0..n {
            for i in 0..height {
                let src = &tiles[t * d + i * tile_width..t * d + (i + 1) * tile_width];
                pixels[i * width + t * tile_width..i * width + (t + 1) * tile_width].copy_from_slice(src);
            }
        }
        Self { height, width, tiles: n, pixels }
    }

    pub fn tile(&self, t: usize) -> Vec<f64> {
        let tw = self.width / self.tiles;
        (0..self.height).flat_map(|i| self.pixels[i * self.width + t * tw..i * self.width + (t + 1) * tw].iter().copied()).collect()
    }
}

/// Decodes the posterior mean of `base_image` with dimension `dim` swept over `grid`.
pub fn traverse(params: &ModelParams, base_image: &[f64], dim: usize, grid: &[f64], height: usize, width: usize) -> Result<ImageStrip> {
    let p = params.config().latent_dim;
    if dim >= p {
        return Err(Error::domain(format!("dimension {dim} out of range for latent size {p}")));
    }
    if grid.is_empty() {
        return Err(Error::domain("traversal grid is empty"));
    }
    if height * width != params.config().input_dim {
        return Err(Error::dims(params.config().input_dim, height * width));
    }
    let mu = encoder_forward(params, base_image)?.mu;
    let zs: Vec<f64> = grid
        .iter()
        .flat_map(|g| {
            let mut z = mu.clone();
            z[dim] = *g;
            z
        })
        .collect();
    let tiles = decode_batch(params, &zs, grid.len())?;
    Ok(ImageStrip::from_tiles(height, width, &tiles))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// `Σ ~ W⁻¹(Ψ, ν)`, then `z ~ N(0, Σ)`.
    Bartlett,
    /// `z ~ N(0, I)`.
    StandardNormal,
}

impl SampleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bartlett" => Ok(SampleMode::Bartlett),
            "standard_normal" | "standard-normal" => Ok(SampleMode::StandardNormal),
            _ => Err(Error::Config(format!("unknown sample mode '{s}'"))),
        }
    }
}

/// `n × p` latent draws from the generative prior.
pub fn sample_latents(p: usize, hp: Option<&HyperpriorParams>, n: usize, mode: SampleMode, rng: &mut RngStream) -> Result<Vec<f64>> {
    match mode {
        SampleMode::StandardNormal => Ok(rng.normal_vec(n * p)),
        SampleMode::Bartlett => {
            let hp = hp.ok_or_else(|| Error::Config("bartlett sampling needs a hyperprior".into()))?;
            if hp.dim() != p {
                return Err(Error::dims(p, hp.dim()));
            }
            let mut out = Vec::with_capacity(n * p);
            for _ in 0..n {
                let sigma = iw_sample_bartlett(hp, rng)?;
                let eps = rng.normal_vec(p);
                out.extend(cholesky(&sigma)?.mat_vec(&eps)?);
            }
            Ok(out)
        }
    }
}

/// Decoded prior samples, `n × D` in (0, 1).
pub fn sample_images(params: &ModelParams, hp: Option<&HyperpriorParams>, n: usize, mode: SampleMode, rng: &mut RngStream) -> Result<Vec<f64>> {
    let zs = sample_latents(params.config().latent_dim, hp, n, mode, rng)?;
    decode_batch(params, &zs, n)
}

/// Runs `write` on a buffered file at `path`.
pub fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, CorrConfig, FactorSpec};
    use crate::distributions::iw_mean;
    use crate::losses::bernoulli_recon;

    fn small_data() -> EllipseDataset {
        generate_dataset(60, &CorrConfig::default(), &FactorSpec::default(), 8, 8, 3).unwrap()
    }

    fn small_config(model: ModelKind) -> TrainConfig {
        TrainConfig {
            model,
            nu: 8.0,
            beta: 4.0,
            sigma0: SpdMatrix::identity(3),
            latent_dim: 3,
            hidden: vec![16, 8],
            batch_size: 10,
            steps: 30,
            eval_interval: 10,
            seed: 9,
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig { nu: 5.0, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.nu = 11.0;
        assert!(c.validate().is_err());
        c.nu = 11.5;
        assert!(c.validate().is_ok());
        let hp = c.hyperprior().unwrap();
        assert_eq!(iw_mean(&hp).unwrap(), c.sigma0);
        c.model = ModelKind::BetaVae;
        c.beta = -1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { sigma0: SpdMatrix::identity(3), ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn psi_construction_hits_target_mean_exactly() {
        for nu in [12.0, 500.0, 13000.0] {
            let c = TrainConfig { nu, ..Default::default() };
            assert_eq!(iw_mean(&c.hyperprior().unwrap()).unwrap(), SpdMatrix::identity(10));
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let data = small_data();
        for model in [ModelKind::Chyvae, ModelKind::BetaVae] {
            let (pa, la) = train(small_config(model), &data, None).unwrap();
            let (pb, lb) = train(small_config(model), &data, None).unwrap();
            assert_eq!(la, lb);
            assert_eq!(pa, pb);
            assert!(la.iter().all(|r| r.total.is_finite()));
            let other = TrainConfig { seed: 10, ..small_config(model) };
            assert_ne!(train(other, &data, None).unwrap().1, la);
        }
    }

    #[test]
    fn resume_continues_the_trace_exactly() {
        let data = small_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(ModelKind::Chyvae);
        let mut full = Trainer::new(cfg.clone(), &data).unwrap();
        full.run(Some(dir.path())).unwrap();

        let ck = Checkpoint::load(checkpoint_path(dir.path(), Some(10))).unwrap();
        assert_eq!(ck.step, 10);
        let cfg2 = TrainConfig::from_checkpoint(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        let mut resumed = Trainer::resume(cfg2, &data, ck).unwrap();
        resumed.run(None).unwrap();
        assert_eq!(resumed.log(), &full.log()[10..]);
        assert_eq!(resumed.params(), full.params());

        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(csv.lines().count(), 31);
        assert!(checkpoint_path(dir.path(), None).exists());
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let data = small_data();
        let t = Trainer::new(small_config(ModelKind::Chyvae), &data).unwrap();
        let ck = t.checkpoint();
        let other = TrainConfig { hidden: vec![4], ..small_config(ModelKind::Chyvae) };
        assert!(Trainer::resume(other, &data, ck).is_err());
    }

    #[test]
    fn recon_term_is_shared_between_objectives() {
        let (x, xh) = ([0.0, 0.25, 1.0], [0.1, 0.3, 0.8]);
        let r = bernoulli_recon(&x, &xh).unwrap();
        let post_d = crate::nn::LatentPosterior::new(vec![0.0; 2], crate::linalg::LowerTriangular::identity(2), 0.0).unwrap();
        let hp = HyperpriorParams::from_target_covariance(&SpdMatrix::identity(2), 5.0).unwrap();
        let a = crate::losses::beta_vae_loss(&x, &post_d, &[0.0; 2], 1.0, &xh).unwrap();
        let b = crate::losses::chyvae_loss(&x, &post_d, &[0.1, 0.2], &hp, &xh).unwrap();
        assert_eq!(a.recon, r);
        assert_eq!(b.recon, r);
    }

    #[test]
    fn traversal_shapes() {
        let data = small_data();
        let t = Trainer::new(small_config(ModelKind::Chyvae), &data).unwrap();
        let x = data.batch(&[0]);
        let mu = encoder_forward(t.params(), &x).unwrap().mu;
        let single = traverse(t.params(), &x, 1, &[mu[1]], 8, 8).unwrap();
        assert_eq!(single.pixels, decode_batch(t.params(), &mu, 1).unwrap());
        let strip = traverse(t.params(), &x, 2, &[-2.0, 0.0, 2.0, 4.0], 8, 8).unwrap();
        assert_eq!((strip.height, strip.width, strip.tiles), (8, 32, 4));
        let mut z = mu.clone();
        z[2] = 4.0;
        assert_eq!(strip.tile(3), decode_batch(t.params(), &z, 1).unwrap());
        assert!(traverse(t.params(), &x, 3, &[0.0], 8, 8).is_err());
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let data = small_data();
        let cfg = small_config(ModelKind::Chyvae);
        let t = Trainer::new(cfg.clone(), &data).unwrap();
        let hp = cfg.hyperprior().unwrap();
        for mode in [SampleMode::Bartlett, SampleMode::StandardNormal] {
            let a = sample_images(t.params(), Some(&hp), 16, mode, &mut RngStream::new(1)).unwrap();
            let b = sample_images(t.params(), Some(&hp), 16, mode, &mut RngStream::new(1)).unwrap();
            assert_eq!(a.len(), 16 * 64);
            assert_eq!(a, b);
            assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        assert!(sample_images(t.params(), None, 1, SampleMode::Bartlett, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn bartlett_latent_covariance_matches_iw_mean() {
        let p = 3;
        let hp = HyperpriorParams::new(crate::linalg::test_util::random_spd(p, &mut RngStream::new(2)), 10.0).unwrap();
        let n = 100_000;
        let z = sample_latents(p, Some(&hp), n, SampleMode::Bartlett, &mut RngStream::new(3)).unwrap();
        let want = iw_mean(&hp).unwrap();
        for i in 0..p {
            for j in 0..=i {
                let prods: Vec<f64> = z.chunks_exact(p).map(|r| r[i] * r[j]).collect();
                let m = prods.iter().sum::<f64>() / n as f64;
                let sd = (prods.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
                let se = sd / (n as f64).sqrt();
                assert!((m - want.get(i, j)).abs() < 3.0 * se, "({i},{j}): {m} vs {}", want.get(i, j));
            }
        }
    }
}
