//! CorrelatedEllipses: correlated factor sampling, anti-aliased ellipse
//! rendering and the `CELD` dataset file format.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use crate::distributions::RngStream;
use crate::error::{Error, Result};

pub const NUM_FACTORS: usize = 4;
pub const FACTOR_NAMES: [&str; NUM_FACTORS] = ["x_position", "y_position", "scale", "orientation"];
pub const X_POSITION: usize = 0;
pub const Y_POSITION: usize = 1;
pub const SCALE: usize = 2;
pub const ORIENTATION: usize = 3;

/// Semi-major axis at scale 1, as a fraction of the shorter image side.
const MAJOR_AXIS_FRACTION: f64 = 0.25;
/// Minor / major axis ratio.
const AXIS_RATIO: f64 = 0.5;
/// Supersampling grid per pixel side.
const SUPERSAMPLE: usize = 4;

/// Value tables for the four factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSpec {
    tables: [Vec<f64>; NUM_FACTORS],
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl Default for FactorSpec {
    /// 32 x-positions and 32 y-positions in [0, 1], 6 scales in [0.5, 1] and
    /// 40 orientations `k·π/20` covering the full turn.
    fn default() -> Self {
        let orientation = (0..40).map(|k| k as f64 * PI / 20.0).collect();
        Self { tables: [linspace(0.0, 1.0, 32), linspace(0.0, 1.0, 32), linspace(0.5, 1.0, 6), orientation] }
    }
}

impl FactorSpec {
    pub fn new(tables: [Vec<f64>; NUM_FACTORS]) -> Result<Self> {
        for (k, t) in tables.iter().enumerate() {
            if t.is_empty() || t.len() > u16::MAX as usize {
                return Err(Error::domain(format!("factor {k} table size {} out of range", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::domain(format!("factor {k} table must be finite and strictly increasing")));
            }
        }
        let (x, y, s) = (&tables[X_POSITION], &tables[Y_POSITION], &tables[SCALE]);
        if x[0] < 0.0 || x[x.len() - 1] > 1.0 || y[0] < 0.0 || y[y.len() - 1] > 1.0 || s[0] <= 0.0 {
            return Err(Error::domain("positions must lie in [0, 1] and scales be positive"));
        }
        Ok(Self { tables })
    }

    pub fn table(&self, k: usize) -> &[f64] {
        &self.tables[k]
    }

    pub fn cardinalities(&self) -> [usize; NUM_FACTORS] {
        [0, 1, 2, 3].map(|k| self.tables[k].len())
    }

    fn check_indices(&self, idx: &[u16; NUM_FACTORS]) -> Result<()> {
        for k in 0..NUM_FACTORS {
            if idx[k] as usize >= self.tables[k].len() {
                return Err(Error::domain(format!("{} index {} out of range", FACTOR_NAMES[k], idx[k])));
            }
        }
        Ok(())
    }
}

/// Correlations of the (x, y) and (scale, orientation) blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrConfig {
    pub rho_pos: f64,
    pub rho_so: f64,
}

impl Default for CorrConfig {
    fn default() -> Self {
        Self { rho_pos: 0.7, rho_so: 0.7 }
    }
}

impl CorrConfig {
    pub fn new(rho_pos: f64, rho_so: f64) -> Result<Self> {
        for r in [rho_pos, rho_so] {
            if !(r > -1.0 && r < 1.0) {
                return Err(Error::domain(format!("correlation {r} must lie in (-1, 1)")));
            }
        }
        Ok(Self { rho_pos, rho_so })
    }

    fn partner_rho(&self, k: usize) -> f64 {
        if k < 2 {
            self.rho_pos
        } else {
            self.rho_so
        }
    }
}

/// Clips a standard-scale coordinate to [−1, 1], maps it to [0, 1] and
/// floor-bins it into `n` equal-width cells.
pub fn bin_coordinate(y: f64, n: usize) -> u16 {
    let u = (y.clamp(-1.0, 1.0) + 1.0) / 2.0;
    ((u * n as f64).floor() as usize).min(n - 1) as u16
}

/// Bins a pre-clip Gaussian draw `y` into factor indices.
pub fn bin_factors(y: &[f64; NUM_FACTORS], spec: &FactorSpec) -> [u16; NUM_FACTORS] {
    [0, 1, 2, 3].map(|k| bin_coordinate(y[k], spec.tables[k].len()))
}

fn correlated_pair(rho: f64, rng: &mut RngStream) -> (f64, f64) {
    let a = rng.standard_normal();
    let b = rng.standard_normal();
    (a, rho * a + (1.0 - rho * rho).sqrt() * b)
}

pub fn sample_factors(cfg: &CorrConfig, spec: &FactorSpec, rng: &mut RngStream) -> [u16; NUM_FACTORS] {
    let (x, y) = correlated_pair(cfg.rho_pos, rng);
    let (s, o) = correlated_pair(cfg.rho_so, rng);
    bin_factors(&[x, y, s, o], spec)
}

/// Samples factors conditioned on factor `k` landing in bin `value`: the pinned
/// coordinate by rejection on its bin, its block partner from the Gaussian
/// conditional, the other block unconditionally.
pub fn sample_factors_given(
    k: usize,
    value: u16,
    cfg: &CorrConfig,
    spec: &FactorSpec,
    rng: &mut RngStream,
) -> Result<[u16; NUM_FACTORS]> {
    if k >= NUM_FACTORS || value as usize >= spec.tables[k].len() {
        return Err(Error::domain(format!("cannot pin factor {k} to bin {value}")));
    }
    let n = spec.tables[k].len();
    let pinned = loop {
        let y = rng.standard_normal();
        if bin_coordinate(y, n) == value {
            break y;
        }
    };
    let rho = cfg.partner_rho(k);
    let partner = rho * pinned + (1.0 - rho * rho).sqrt() * rng.standard_normal();
    let (a, b) = correlated_pair(cfg.partner_rho(k ^ 2), rng);
    let mut y = [0.0; NUM_FACTORS];
    y[k] = pinned;
    y[k ^ 1] = partner;
    let other = if k < 2 { 2 } else { 0 };
    y[other] = a;
    y[other + 1] = b;
    let mut idx = bin_factors(&y, spec);
    idx[k] = value;
    Ok(idx)
}

/// Renders a filled ellipse as an 8-bit grayscale `h × w` image (row-major).
pub fn render_ellipse(idx: &[u16; NUM_FACTORS], spec: &FactorSpec, h: usize, w: usize) -> Result<Vec<u8>> {
    spec.check_indices(idx)?;
    if h < 4 || w < 4 {
        return Err(Error::domain("image must be at least 4x4"));
    }
    let unit = MAJOR_AXIS_FRACTION * h.min(w) as f64;
    let max_scale = spec.tables[SCALE][spec.tables[SCALE].len() - 1];
    let margin = unit * max_scale;
    let v = |k: usize| spec.tables[k][idx[k] as usize];
    let cx = margin + v(X_POSITION) * (w as f64 - 2.0 * margin);
    let cy = margin + v(Y_POSITION) * (h as f64 - 2.0 * margin);
    let a = unit * v(SCALE);
    let b = AXIS_RATIO * a;
    // an ellipse is symmetric under a half turn
    let theta = v(ORIENTATION).rem_euclid(PI);
    let (sin, cos) = theta.sin_cos();
    let (ia2, ib2) = (1.0 / (a * a), 1.0 / (b * b));

    let ss = SUPERSAMPLE as f64;
    let total = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut img = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut hits = 0u32;
            for si in 0..SUPERSAMPLE {
                let dy = i as f64 + (si as f64 + 0.5) / ss - cy;
                for sj in 0..SUPERSAMPLE {
                    let dx = j as f64 + (sj as f64 + 0.5) / ss - cx;
                    let u = dx * cos + dy * sin;
                    let t = -dx * sin + dy * cos;
                    if u * u * ia2 + t * t * ib2 <= 1.0 {
                        hits += 1;
                    }
                }
            }
            img[i * w + j] = (255.0 * hits as f64 / total).round() as u8;
        }
    }
    Ok(img)
}

/// Rendered images with their factor indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipseDataset {
    pub height: usize,
    pub width: usize,
    pub spec: FactorSpec,
    pub factors: Vec<[u16; NUM_FACTORS]>,
    pub pixels: Vec<u8>,
}

impl EllipseDataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.image_size();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Images `indices`, scaled to [0, 1], concatenated row-major.
    pub fn batch(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.image(i).iter().map(|&p| to_unit(p))).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(NUM_FACTORS as u16).to_le_bytes())?;
        for c in self.spec.cardinalities() {
            w.write_all(&(c as u16).to_le_bytes())?;
        }
        for t in &self.spec.tables {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for i in 0..self.len() {
            for f in self.factors[i] {
                w.write_all(&f.to_le_bytes())?;
            }
            w.write_all(self.image(i))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a CELD dataset (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(r)?);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let height = u32::from_le_bytes(take(r)?) as usize;
        let width = u32::from_le_bytes(take(r)?) as usize;
        let n = u64::from_le_bytes(take(r)?) as usize;
        let k = u16::from_le_bytes(take(r)?) as usize;
        if k != NUM_FACTORS {
            return Err(Error::Format(format!("expected {NUM_FACTORS} factors, found {k}")));
        }
        if !(4..=4096).contains(&height) || !(4..=4096).contains(&width) {
            return Err(Error::Format(format!("implausible image size {height}x{width}")));
        }
        let mut cards = [0usize; NUM_FACTORS];
        for c in &mut cards {
            *c = u16::from_le_bytes(take(r)?) as usize;
        }
        let mut tables: [Vec<f64>; NUM_FACTORS] = Default::default();
        for (t, &c) in tables.iter_mut().zip(&cards) {
            *t = (0..c).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect::<Result<_>>()?;
        }
        let spec = FactorSpec::new(tables).map_err(|e| Error::Format(format!("invalid factor tables: {e}")))?;
        let d = height * width;
        let mut factors = Vec::new();
        let mut pixels = Vec::new();
        let mut record = vec![0u8; 2 * NUM_FACTORS + d];
        for i in 0..n {
            read_exact(r, &mut record)?;
            let mut idx = [0u16; NUM_FACTORS];
            for (f, c) in idx.iter_mut().zip(record.chunks_exact(2)) {
                *f = u16::from_le_bytes([c[0], c[1]]);
            }
            spec.check_indices(&idx).map_err(|_| Error::Format(format!("record {i}: factor index out of range")))?;
            factors.push(idx);
            pixels.extend_from_slice(&record[2 * NUM_FACTORS..]);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { height, width, spec, factors, pixels })
    }
}

const DATASET_MAGIC: &[u8; 4] = b"CELD";
const DATASET_VERSION: u16 = 1;

pub fn to_unit(p: u8) -> f64 {
    p as f64 / 255.0
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated dataset file".into()),
        _ => Error::Io(e),
    })
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Sample `i` draws from its own stream derived from `(seed, i)`.
pub fn generate_dataset(n: usize, cfg: &CorrConfig, spec: &FactorSpec, h: usize, w: usize, seed: u64) -> Result<EllipseDataset> {
    if n == 0 {
        return Err(Error::domain("dataset needs at least one sample"));
    }
    let root = RngStream::new(seed);
    let mut factors = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let mut rng = root.derive(i as u64);
        let idx = sample_factors(cfg, spec, &mut rng);
        pixels.extend(render_ellipse(&idx, spec, h, w)?);
        factors.push(idx);
    }
    Ok(EllipseDataset { height: h, width: w, spec: spec.clone(), factors, pixels })
}

pub fn write_dataset(ds: &EllipseDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    ds.write_to(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<EllipseDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    EllipseDataset::read_from(&mut f)
}

/// `l` images with factor `k` pinned to bin `value` and the rest drawn from
/// the conditional factor distribution. Returns the images scaled to [0, 1]
/// (row-major) and their factor indices.
#[allow(clippy::too_many_arguments)]
pub fn fixed_factor_batch(
    k: usize,
    l: usize,
    value: u16,
    cfg: &CorrConfig,
    spec: &FactorSpec,
    h: usize,
    w: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<[u16; NUM_FACTORS]>)> {
    let mut images = Vec::with_capacity(l * h * w);
    let mut factors = Vec::with_capacity(l);
    for _ in 0..l {
        let idx = sample_factors_given(k, value, cfg, spec, rng)?;
        images.extend(render_ellipse(&idx, spec, h, w)?.into_iter().map(to_unit));
        factors.push(idx);
    }
    Ok((images, factors))
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Pairwise Pearson correlations of binned factor indices.
pub fn factor_correlations(factors: &[[u16; NUM_FACTORS]]) -> [[f64; NUM_FACTORS]; NUM_FACTORS] {
    let cols: Vec<Vec<f64>> = (0..NUM_FACTORS).map(|k| factors.iter().map(|f| f[k] as f64).collect()).collect();
    let mut c = [[1.0; NUM_FACTORS]; NUM_FACTORS];
    for i in 0..NUM_FACTORS {
        for j in 0..i {
            c[i][j] = pearson(&cols[i], &cols[j]);
            c[j][i] = c[i][j];
        }
    }
    c
}
