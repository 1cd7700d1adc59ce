//! MLP encoder/decoder, Glorot initialization, Adam and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::linalg::{LowerTriangular, SpdMatrix};

/// Diagonal jitter added to the posterior covariance.
pub const COVARIANCE_JITTER: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Full lower-triangular factor from a `p²` head.
    Chyvae,
    /// Diagonal factor from a softplus `p` head (β-VAE).
    Diagonal,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Chyvae => "chyvae",
            EncoderMode::Diagonal => "diagonal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub mode: EncoderMode,
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, latent_dim: usize, mode: EncoderMode) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self { input_dim, hidden, latent_dim, mode })
    }

    fn scale_head_dim(&self) -> usize {
        match self.mode {
            EncoderMode::Chyvae => self.latent_dim * self.latent_dim,
            EncoderMode::Diagonal => self.latent_dim,
        }
    }

    /// `(name, fan_in, fan_out)` for every dense layer, in storage order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("encoder.dense{i}"), prev, h));
            prev = h;
        }
        out.push(("encoder.mean".into(), prev, self.latent_dim));
        out.push(("encoder.scale".into(), prev, self.scale_head_dim()));
        prev = self.latent_dim;
        for (i, &h) in self.hidden.iter().rev().enumerate() {
            out.push((format!("decoder.dense{i}"), prev, h));
            prev = h;
        }
        out.push(("decoder.logits".into(), prev, self.input_dim));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All encoder and decoder weights in a fixed order: for each dense layer a
/// `[fan_in, fan_out]` weight followed by a `[fan_out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

impl ModelParams {
    fn build(config: &ModelConfig, mut fill: impl FnMut(usize, usize) -> (Vec<f64>, Vec<f64>)) -> Self {
        let mut tensors = Vec::new();
        for (name, fan_in, fan_out) in config.layers() {
            let (w, b) = fill(fan_in, fan_out);
            tensors.push(NamedTensor {
                name: format!("{name}.weight"),
                tensor: Tensor { shape: vec![fan_in, fan_out], values: w, requires_grad: true },
            });
            tensors.push(NamedTensor {
                name: format!("{name}.bias"),
                tensor: Tensor { shape: vec![fan_out], values: b, requires_grad: true },
            });
        }
        Self { config: config.clone(), tensors }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::build(config, |i, o| (vec![0.0; i * o], vec![0.0; o]))
    }

    /// Rebuilds parameters from raw values in storage order.
    pub fn from_values(config: &ModelConfig, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = Self::zeros(config);
        if values.len() != p.tensors.len() {
            return Err(Error::dims(p.tensors.len(), values.len()));
        }
        for (t, v) in p.tensors.iter_mut().zip(values) {
            if v.len() != t.tensor.values.len() {
                return Err(Error::dims(t.tensor.values.len(), v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(format!("non-finite value in {}", t.name)));
            }
            t.tensor.values = v;
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.values.len()).sum()
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(Tensor { requires_grad: trainable, ..t.tensor.clone() }))
            .collect();
        ParamVars { vars, n_hidden: self.config.hidden.len() }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &ModelConfig, rng: &mut RngStream) -> ModelParams {
    ModelParams::build(config, |fan_in, fan_out| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
        (w, vec![0.0; fan_out])
    })
}

/// Tape handles for a [`ModelParams`], in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    n_hidden: usize,
}

impl ParamVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

/// Per-example posterior nodes.
#[derive(Clone, Copy, Debug)]
pub struct ExamplePosterior {
    /// `[p]`
    pub mu: Var,
    /// `[p, p]` lower-triangular factor in chyvae mode, `[p]` standard deviations in diagonal mode.
    pub scale: Var,
}

fn dense(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row_bias(h, b)
}

/// Encoder on a `[B, D]` batch.
pub fn encode_tape(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, x: Var) -> Result<Vec<ExamplePosterior>> {
    let [b, d] = tape.shape(x)[..] else {
        return Err(Error::dims("[batch, D]", format!("{:?}", tape.shape(x))));
    };
    if d != cfg.input_dim {
        return Err(Error::dims(cfg.input_dim, d));
    }
    let mut h = x;
    for i in 0..pv.n_hidden {
        let a = dense(tape, h, pv.layer(i))?;
        h = tape.relu(a);
    }
    let mu = dense(tape, h, pv.layer(pv.n_hidden))?;
    let head = dense(tape, h, pv.layer(pv.n_hidden + 1))?;
    let p = cfg.latent_dim;
    let mut rows = Vec::with_capacity(b);
    match cfg.mode {
        EncoderMode::Chyvae => {
            for i in 0..b {
                let m = tape.slice(mu, i * p, p)?;
                let a = tape.slice(head, i * p * p, p * p)?;
                let l = tape.lower_triangular_assemble(a)?;
                rows.push(ExamplePosterior { mu: m, scale: l });
            }
        }
        EncoderMode::Diagonal => {
            let sig = tape.softplus(head);
            for i in 0..b {
                let m = tape.slice(mu, i * p, p)?;
                let s = tape.slice(sig, i * p, p)?;
                rows.push(ExamplePosterior { mu: m, scale: s });
            }
        }
    }
    Ok(rows)
}

/// `z = μ̃ + L̃ε` (or `μ̃ + σ̃⊙ε`) for one example.
pub fn reparam_tape(tape: &mut Tape, post: &ExamplePosterior, mode: EncoderMode, eps: &[f64]) -> Result<Var> {
    let e = tape.constant(vec![eps.len()], eps.to_vec())?;
    let noise = match mode {
        EncoderMode::Chyvae => tape.matvec(post.scale, e)?,
        EncoderMode::Diagonal => tape.mul(post.scale, e)?,
    };
    tape.add(post.mu, noise)
}

/// Decoder logits for a `[B, p]` latent batch.
pub fn decode_tape(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, z: Var) -> Result<Var> {
    match tape.shape(z) {
        [_, p] if *p == cfg.latent_dim => {}
        s => return Err(Error::dims(format!("[batch, {}]", cfg.latent_dim), format!("{s:?}"))),
    }
    let first_dec = pv.n_hidden + 2;
    let mut h = z;
    for i in 0..pv.n_hidden {
        let a = dense(tape, h, pv.layer(first_dec + i))?;
        h = tape.relu(a);
    }
    dense(tape, h, pv.layer(first_dec + pv.n_hidden))
}

/// Per-example Gaussian posterior `N(μ̃, L̃L̃ᵀ + jitter·I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: Vec<f64>,
    pub chol: LowerTriangular,
    pub sigma: SpdMatrix,
}

impl LatentPosterior {
    pub fn new(mu: Vec<f64>, chol: LowerTriangular, jitter: f64) -> Result<Self> {
        let p = chol.dim();
        if mu.len() != p {
            return Err(Error::dims(p, mu.len()));
        }
        let mut sigma = chol.gram();
        if jitter != 0.0 {
            sigma = sigma.add(&SpdMatrix::scaled_identity(p, jitter))?;
        }
        Ok(Self { mu, chol, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_unit_interval(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain("inputs must lie in [0, 1]"));
    }
    Ok(())
}

/// Posteriors for `n` row-major images.
pub fn encode_batch(params: &ModelParams, xs: &[f64], n: usize) -> Result<Vec<LatentPosterior>> {
    let cfg = params.config();
    if xs.len() != n * cfg.input_dim || n == 0 {
        return Err(Error::dims(n * cfg.input_dim, xs.len()));
    }
    check_unit_interval(xs)?;
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, false);
    let x = tape.constant(vec![n, cfg.input_dim], xs.to_vec())?;
    let rows = encode_tape(&mut tape, &pv, cfg, x)?;
    let p = cfg.latent_dim;
    rows.iter()
        .map(|r| {
            let mu = tape.value(r.mu).to_vec();
            let chol = match cfg.mode {
                EncoderMode::Chyvae => LowerTriangular::new(p, tape.value(r.scale).to_vec())?,
                EncoderMode::Diagonal => {
                    let mut d = vec![0.0; p * p];
                    for (i, s) in tape.value(r.scale).iter().enumerate() {
                        d[i * p + i] = *s;
                    }
                    LowerTriangular::new(p, d)?
                }
            };
            LatentPosterior::new(mu, chol, COVARIANCE_JITTER)
        })
        .collect()
}

pub fn encoder_forward(params: &ModelParams, x: &[f64]) -> Result<LatentPosterior> {
    Ok(encode_batch(params, x, 1)?.remove(0))
}

/// Posterior means only, `n × p` row-major; processed in chunks to bound memory.
pub fn encode_means(params: &ModelParams, xs: &[f64], n: usize) -> Result<Vec<f64>> {
    let d = params.config().input_dim;
    let mut out = Vec::with_capacity(n * params.config().latent_dim);
    for chunk in xs.chunks(256 * d) {
        for post in encode_batch(params, chunk, chunk.len() / d)? {
            out.extend(post.mu);
        }
    }
    Ok(out)
}

/// Bernoulli means for `n` latent rows, `n × D` row-major.
pub fn decode_batch(params: &ModelParams, zs: &[f64], n: usize) -> Result<Vec<f64>> {
    let cfg = params.config();
    if zs.len() != n * cfg.latent_dim || n == 0 {
        return Err(Error::dims(n * cfg.latent_dim, zs.len()));
    }
    if zs.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("latent values must be finite"));
    }
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, false);
    let z = tape.constant(vec![n, cfg.latent_dim], zs.to_vec())?;
    let logits = decode_tape(&mut tape, &pv, cfg, z)?;
    let out = tape.sigmoid(logits);
    Ok(tape.value(out).to_vec())
}

pub fn decoder_forward(params: &ModelParams, z: &[f64]) -> Result<Vec<f64>> {
    decode_batch(params, z, 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = shapes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.tensors().iter().map(|t| t.tensor.values.len()))
    }
}

/// Bias-corrected Adam update of `values` in place. Rejects the whole step
/// (leaving everything untouched) if any gradient is non-finite.
pub fn adam_update(values: &mut [&mut Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if values.len() != grads.len() || state.m.len() != grads.len() {
        return Err(Error::dims(values.len(), grads.len()));
    }
    for (i, (v, g)) in values.iter().zip(grads).enumerate() {
        if v.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dims(v.len(), g.len()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("parameter tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (w, g)) in values.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One Adam step on model parameters; `grads` in storage order.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let mut values: Vec<&mut Vec<f64>> = params.tensors.iter_mut().map(|t| &mut t.tensor.values).collect();
    adam_update(&mut values, grads, state, cfg)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CHVK";
const CHECKPOINT_VERSION: u16 = 1;

/// Parameters, optimizer state, step counter and a free-form config echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = self.params.config();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[match cfg.mode {
            EncoderMode::Chyvae => 0u8,
            EncoderMode::Diagonal => 1u8,
        }])?;
        put_u32(w, cfg.input_dim)?;
        put_u32(w, cfg.latent_dim)?;
        put_u32(w, cfg.hidden.len())?;
        for &h in &cfg.hidden {
            put_u32(w, h)?;
        }
        put_u32(w, self.meta.len())?;
        for (k, v) in &self.meta {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        put_u32(w, self.params.tensors.len())?;
        for (i, t) in self.params.tensors.iter().enumerate() {
            put_str(w, &t.name)?;
            put_f64s(w, &t.tensor.values)?;
            put_f64s(w, &self.adam.m[i])?;
            put_f64s(w, &self.adam.v[i])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mode = match take::<1>(r)?[0] {
            0 => EncoderMode::Chyvae,
            1 => EncoderMode::Diagonal,
            m => return Err(Error::Format(format!("unknown encoder mode {m}"))),
        };
        let input_dim = get_u32(r)?;
        let latent_dim = get_u32(r)?;
        let n_hidden = get_u32(r)?;
        if n_hidden > 64 {
            return Err(Error::Format("implausible layer count".into()));
        }
        let hidden = (0..n_hidden).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::new(input_dim, hidden, latent_dim, mode).map_err(|e| Error::Format(e.to_string()))?;
        let n_meta = get_u32(r)?;
        let meta = (0..n_meta).map(|_| Ok((get_str(r)?, get_str(r)?))).collect::<Result<Vec<_>>>()?;
        let step = u64::from_le_bytes(take(r)?);
        let adam_step = u64::from_le_bytes(take(r)?);

        let mut params = ModelParams::zeros(&config);
        let n_tensors = get_u32(r)?;
        if n_tensors != params.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {n_tensors}", params.tensors.len())));
        }
        let mut adam = AdamState::for_params(&params);
        adam.step = adam_step;
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let name = get_str(r)?;
            if name != t.name {
                return Err(Error::Format(format!("expected tensor {}, found {name}", t.name)));
            }
            let n = t.tensor.values.len();
            t.tensor.values = get_f64s(r, n)?;
            adam.m[i] = get_f64s(r, n)?;
            adam.v[i] = get_f64s(r, n)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { params, adam, step, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format("value exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)?;
    if n > 1 << 16 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid utf-8 in string field".into()))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut b = vec![0u8; n * 8];
    read_exact(r, &mut b)?;
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
