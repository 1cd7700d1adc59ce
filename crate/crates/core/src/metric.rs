//! Majority-vote disentanglement metric.
//!
//! For a fixed factor, the latent dimension whose normalized variance is
//! smallest over a batch votes for that factor. A vote matrix built from `B`
//! such pairs then classifies `N` fresh pairs; the score is the accuracy.

use crate::data::{fixed_factor_batch, render_ellipse, sample_factors, to_unit, CorrConfig, FactorSpec, FACTOR_NAMES, NUM_FACTORS};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::nn::{encode_means, ModelParams};

pub const STD_FLOOR: f64 = 1e-8;

/// Maps images (with their ground-truth factors) to latent codes.
pub trait LatentEncoder {
    fn latent_dim(&self) -> usize;

    /// `n` images, row-major in [0, 1], to `n × p` codes.
    fn encode(&mut self, images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>>;
}

/// Posterior means of a trained model.
impl LatentEncoder for ModelParams {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn encode(&mut self, images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>> {
        encode_means(self, images, factors.len())
    }
}

impl<E: LatentEncoder + ?Sized> LatentEncoder for &mut E {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn encode(&mut self, images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>> {
        (**self).encode(images, factors)
    }
}

/// Reads the ground-truth factor values: dimension `perm[j]` carries factor `j`.
#[derive(Clone, Debug)]
pub struct FactorOracle {
    spec: FactorSpec,
    perm: [usize; NUM_FACTORS],
}

impl FactorOracle {
    pub fn new(spec: FactorSpec) -> Self {
        Self { spec, perm: [0, 1, 2, 3] }
    }

    pub fn permuted(spec: FactorSpec, perm: [usize; NUM_FACTORS]) -> Result<Self> {
        let mut seen = [false; NUM_FACTORS];
        for &d in &perm {
            if d >= NUM_FACTORS || std::mem::replace(&mut seen[d], true) {
                return Err(Error::domain("not a permutation"));
            }
        }
        Ok(Self { spec, perm })
    }
}

impl LatentEncoder for FactorOracle {
    fn latent_dim(&self) -> usize {
        NUM_FACTORS
    }

    fn encode(&mut self, _images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; factors.len() * NUM_FACTORS];
        for (row, f) in out.chunks_exact_mut(NUM_FACTORS).zip(factors) {
            for j in 0..NUM_FACTORS {
                row[self.perm[j]] = self.spec.table(j)[f[j] as usize];
            }
        }
        Ok(out)
    }
}

/// Standard-normal codes unrelated to the input.
#[derive(Clone, Debug)]
pub struct NoiseEncoder {
    dim: usize,
    rng: RngStream,
}

impl NoiseEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, rng: RngStream::new(seed) }
    }
}

impl LatentEncoder for NoiseEncoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&mut self, _images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>> {
        Ok(self.rng.normal_vec(factors.len() * self.dim))
    }
}

/// Rescales, then permutes, the output of another encoder: output dimension
/// `perm[i]` holds `scales[i]` times inner dimension `i`.
pub struct Transformed<E> {
    pub inner: E,
    pub scales: Vec<f64>,
    pub perm: Vec<usize>,
}

impl<E: LatentEncoder> LatentEncoder for Transformed<E> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn encode(&mut self, images: &[f64], factors: &[[u16; NUM_FACTORS]]) -> Result<Vec<f64>> {
        let p = self.latent_dim();
        let z = self.inner.encode(images, factors)?;
        let mut out = vec![0.0; z.len()];
        for (src, dst) in z.chunks_exact(p).zip(out.chunks_exact_mut(p)) {
            for i in 0..p {
                dst[self.perm[i]] = self.scales[i] * src[i];
            }
        }
        Ok(out)
    }
}

/// Image generator the metric draws from.
#[derive(Clone, Debug)]
pub struct FactorSource {
    pub cfg: CorrConfig,
    pub spec: FactorSpec,
    pub height: usize,
    pub width: usize,
}

impl FactorSource {
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<(Vec<f64>, Vec<[u16; NUM_FACTORS]>)> {
        let mut images = Vec::with_capacity(n * self.height * self.width);
        let mut factors = Vec::with_capacity(n);
        for _ in 0..n {
            let f = sample_factors(&self.cfg, &self.spec, rng);
            images.extend(render_ellipse(&f, &self.spec, self.height, self.width)?.into_iter().map(to_unit));
            factors.push(f);
        }
        Ok((images, factors))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricConfig {
    /// Images per fixed-factor batch.
    pub l: usize,
    /// Images for the normalization statistics.
    pub m: usize,
    /// Voting pairs.
    pub b: usize,
    /// Test pairs.
    pub n: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { l: 50, m: 1000, b: 200, n: 200 }
    }
}

impl MetricConfig {
    pub const FULL_SCALE: MetricConfig = MetricConfig { l: 200, m: 5000, b: 800, n: 800 };

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 || self.m < 2 || self.b == 0 || self.n == 0 {
            return Err(Error::Config("metric needs L ≥ 2, M ≥ 2, B ≥ 1, N ≥ 1".into()));
        }
        Ok(())
    }
}

fn column_stats(z: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (z.len() / p) as f64;
    let mut mean = vec![0.0; p];
    for row in z.chunks_exact(p) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; p];
    for row in z.chunks_exact(p) {
        for j in 0..p {
            var[j] += (row[j] - mean[j]).powi(2) / (n - 1.0);
        }
    }
    (mean, var)
}

/// Per-dimension standard deviation of the codes of `m` random images, floored at [`STD_FLOOR`].
pub fn normalization_stds(enc: &mut impl LatentEncoder, src: &FactorSource, m: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Config("normalization needs at least two images".into()));
    }
    let (images, factors) = src.sample(m, rng)?;
    let z = enc.encode(&images, &factors)?;
    let (_, var) = column_stats(&z, enc.latent_dim());
    Ok(var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect())
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// One `(d, k)` data point: the normalized-variance argmin over a batch with factor `k` pinned.
pub fn collect_pair(
    k: usize,
    enc: &mut impl LatentEncoder,
    stds: &[f64],
    l: usize,
    src: &FactorSource,
    rng: &mut RngStream,
) -> Result<usize> {
    let p = enc.latent_dim();
    if stds.len() != p {
        return Err(Error::dims(p, stds.len()));
    }
    let value = sample_factors(&src.cfg, &src.spec, rng)[k];
    let (images, factors) = fixed_factor_batch(k, l, value, &src.cfg, &src.spec, src.height, src.width, rng)?;
    let mut z = enc.encode(&images, &factors)?;
    for row in z.chunks_exact_mut(p) {
        for (v, s) in row.iter_mut().zip(stds) {
            *v /= s;
        }
    }
    let (_, var) = column_stats(&z, p);
    Ok(argmin(&var))
}

/// `p × K` counts of `(dimension, factor)` votes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteMatrix {
    p: usize,
    counts: Vec<u64>,
}

impl VoteMatrix {
    pub fn new(p: usize) -> Self {
        Self { p, counts: vec![0; p * NUM_FACTORS] }
    }

    pub fn latent_dim(&self) -> usize {
        self.p
    }

    pub fn get(&self, d: usize, k: usize) -> u64 {
        self.counts[d * NUM_FACTORS + k]
    }

    pub fn add(&mut self, d: usize, k: usize) {
        self.counts[d * NUM_FACTORS + k] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn column_sums(&self) -> [u64; NUM_FACTORS] {
        let mut s = [0; NUM_FACTORS];
        for row in self.counts.chunks_exact(NUM_FACTORS) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        s
    }

    /// Factor with the most votes for dimension `d`, lowest index on ties.
    pub fn predict(&self, d: usize) -> usize {
        let row = &self.counts[d * NUM_FACTORS..(d + 1) * NUM_FACTORS];
        let mut best = 0;
        for (k, c) in row.iter().enumerate() {
            if *c > row[best] {
                best = k;
            }
        }
        best
    }

    /// Factor name assigned to dimension `d`, or `None` if it never won a vote.
    pub fn annotation(&self, d: usize) -> Option<&'static str> {
        let has_votes = (0..NUM_FACTORS).any(|k| self.get(d, k) > 0);
        has_votes.then(|| FACTOR_NAMES[self.predict(d)])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("dimension,{},assigned\n", FACTOR_NAMES.join(","));
        for d in 0..self.p {
            let row: Vec<String> = (0..NUM_FACTORS).map(|k| self.get(d, k).to_string()).collect();
            s += &format!("{d},{},{}\n", row.join(","), self.annotation(d).unwrap_or("none"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricResult {
    pub score: f64,
    pub votes: VoteMatrix,
    pub stds: Vec<f64>,
    /// `(d, k)` test pairs.
    pub test_pairs: Vec<(usize, usize)>,
}

const NORMALIZATION_STREAM: u64 = 0;
const VOTE_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Each pair draws from its own stream derived from `rng`, so collection
/// order does not affect the result.
pub fn metric_score(enc: &mut impl LatentEncoder, cfg: &MetricConfig, src: &FactorSource, rng: &RngStream) -> Result<MetricResult> {
    cfg.validate()?;
    let stds = normalization_stds(enc, src, cfg.m, &mut rng.derive(NORMALIZATION_STREAM))?;
    let mut pair = |stream: u64, i: usize| -> Result<(usize, usize)> {
        let mut r = rng.derive_path(&[stream, i as u64]);
        let k = r.below(NUM_FACTORS as u64) as usize;
        Ok((collect_pair(k, enc, &stds, cfg.l, src, &mut r)?, k))
    };
    let mut votes = VoteMatrix::new(stds.len());
    for b in 0..cfg.b {
        let (d, k) = pair(VOTE_STREAM, b)?;
        votes.add(d, k);
    }
    let test_pairs = (0..cfg.n).map(|n| pair(TEST_STREAM, n)).collect::<Result<Vec<_>>>()?;
    let correct = test_pairs.iter().filter(|(d, k)| votes.predict(*d) == *k).count();
    Ok(MetricResult { score: correct as f64 / cfg.n as f64, votes, stds, test_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source() -> FactorSource {
        FactorSource { cfg: CorrConfig::default(), spec: FactorSpec::default(), height: 32, width: 32 }
    }

    struct Constant;
    impl LatentEncoder for Constant {
        fn latent_dim(&self) -> usize {
            3
        }
        fn encode(&mut self, _: &[f64], f: &[[u16; 4]]) -> Result<Vec<f64>> {
            Ok(vec![0.7; 3 * f.len()])
        }
    }

    #[test]
    fn constant_encoder_hits_the_floor() {
        let s = normalization_stds(&mut Constant, &source(), 10, &mut RngStream::new(0)).unwrap();
        assert_eq!(s, vec![STD_FLOOR; 3]);
        assert!(normalization_stds(&mut Constant, &source(), 1, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn factor_value_stds_match_population() {
        let src = source();
        // population moments of the factor values from a large factor-only sample
        let mut rng = RngStream::new(99);
        let big: Vec<[u16; 4]> = (0..1_000_000).map(|_| sample_factors(&src.cfg, &src.spec, &mut rng)).collect();
        let m = 2000;
        let s = normalization_stds(&mut FactorOracle::new(src.spec.clone()), &src, m, &mut RngStream::new(1)).unwrap();
        for k in 0..4 {
            let vals: Vec<f64> = big.iter().map(|f| src.spec.table(k)[f[k] as usize]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mu4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            // delta method: SE(s) ≈ sqrt((μ₄ − σ⁴)/M) / (2σ)
            let se = ((mu4 - var * var) / m as f64).sqrt() / (2.0 * var.sqrt());
            assert!((s[k] - var.sqrt()).abs() < 3.0 * se, "factor {k}: {} vs {} (se {se})", s[k], var.sqrt());
        }
    }

    #[test]
    fn doubling_a_dimension_doubles_its_std() {
        let src = source();
        let spec = src.spec.clone();
        let a = normalization_stds(&mut FactorOracle::new(spec.clone()), &src, 100, &mut RngStream::new(3)).unwrap();
        let mut t = Transformed { inner: FactorOracle::new(spec), scales: vec![1.0, 2.0, 1.0, 1.0], perm: vec![0, 1, 2, 3] };
        let b = normalization_stds(&mut t, &src, 100, &mut RngStream::new(3)).unwrap();
        assert_eq!(b[1], 2.0 * a[1]);
        assert_eq!(b[0], a[0]);
    }

    #[test]
    fn oracle_pairs_recover_the_factor() {
        let src = source();
        let mut rng = RngStream::new(4);
        let mut oracle = FactorOracle::new(src.spec.clone());
        let stds = normalization_stds(&mut oracle, &src, 200, &mut rng).unwrap();
        let perm = [2, 0, 3, 1];
        let mut permuted = FactorOracle::permuted(src.spec.clone(), perm).unwrap();
        let pstds = normalization_stds(&mut permuted, &src, 200, &mut rng).unwrap();
        for k in 0..4 {
            for _ in 0..5 {
                assert_eq!(collect_pair(k, &mut oracle, &stds, 50, &src, &mut rng).unwrap(), k);
                assert_eq!(collect_pair(k, &mut permuted, &pstds, 50, &src, &mut rng).unwrap(), perm[k]);
            }
        }
        assert!(FactorOracle::permuted(src.spec.clone(), [0, 0, 1, 2]).is_err());
    }

    #[test]
    fn noise_pairs_do_not_concentrate() {
        let src = source();
        let mut enc = NoiseEncoder::new(10, 1);
        let stds = vec![1.0; 10];
        let mut rng = RngStream::new(5);
        let mut counts = [0usize; 10];
        for b in 0..800 {
            counts[collect_pair(b % 4, &mut enc, &stds, 20, &src, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c < 480), "{counts:?}");
    }

    #[test]
    fn scores_for_oracle_and_noise() {
        let src = source();
        let cfg = MetricConfig { l: 50, m: 500, b: 200, n: 200 };
        let r = metric_score(&mut FactorOracle::new(src.spec.clone()), &cfg, &src, &RngStream::new(6)).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.votes.total(), 200);
        let cols = r.votes.column_sums();
        for k in 0..4 {
            assert_eq!(cols[k], r.votes.get(k, k));
            assert_eq!(r.votes.annotation(k), Some(FACTOR_NAMES[k]));
        }
        let r = metric_score(&mut NoiseEncoder::new(10, 2), &cfg, &src, &RngStream::new(7)).unwrap();
        assert!((0.10..=0.40).contains(&r.score), "{}", r.score);
    }

    #[test]
    fn vote_matrix_ties_and_csv() {
        let mut v = VoteMatrix::new(2);
        assert_eq!(v.predict(0), 0);
        assert_eq!(v.annotation(0), None);
        v.add(0, 3);
        v.add(0, 1);
        assert_eq!(v.predict(0), 1);
        v.add(0, 3);
        assert_eq!(v.predict(0), 3);
        assert_eq!(v.column_sums(), [0, 1, 0, 2]);
        let csv = v.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "dimension,x_position,y_position,scale,orientation,assigned");
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0,1,0,2,orientation");
        assert_eq!(csv.lines().nth(2).unwrap(), "1,0,0,0,0,none");
    }
}
