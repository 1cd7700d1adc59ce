//! Numerical self-check suite: closed forms against Monte-Carlo and dense
//! oracles, finite-difference gradients, sampler moments, metric controls,
//! dataset statistics and determinism.
//!
//! Each check returns a [`CheckOutcome`]; [`run_suite`] collects them for the
//! `check` command.

use std::time::Instant;

use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::{factor_correlations, generate_dataset, CorrConfig, EllipseDataset, FactorSpec, NUM_FACTORS};
use crate::distributions::{iw_kl, iw_mean, iw_sample_bartlett, mvn_log_pdf, HyperpriorParams, RngStream};
use crate::error::Result;
use crate::linalg::{log_det_spd, rank1_inverse, rank1_logdet, spd_inverse, LowerTriangular, SpdMatrix};
use crate::losses::{chyvae_elbo_exact, evaluate_batch, Objective};
use crate::metric::{metric_score, FactorOracle, FactorSource, MetricConfig, NoiseEncoder, Transformed};
use crate::nn::{init_params, Checkpoint, EncoderMode, LatentPosterior, ModelConfig};
use crate::trainer::{ModelKind, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    fn timed(name: &'static str, start: Instant, run: Result<(bool, String)>) -> Self {
        let (passed, detail) = run.unwrap_or_else(|e| (false, format!("error: {e}")));
        Self { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
    }

    /// `PASS name  detail (1.2s)`
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quick" => Some(Level::Quick),
            "full" => Some(Level::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub level: Level,
    pub seed: u64,
    /// Added to the closed-form Gaussian-KL value before it is compared with
    /// Monte Carlo. Non-zero only as a negative control.
    pub tamper_kl_constant: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { level: Level::Quick, seed: 0, tamper_kl_constant: 0.0 }
    }
}

/// Runs every check at the sizes of `opts.level`.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckOutcome> {
    let (instances, samples) = match opts.level {
        Level::Quick => (5, 20_000),
        Level::Full => (20, 100_000),
    };
    let seed = opts.seed;
    let [gaussian, iw] = closed_form_vs_mc(instances, samples, seed, opts.tamper_kl_constant);
    vec![
        gaussian,
        iw,
        iw_kl_scalar_oracle(200, seed),
        gradient_vs_finite_diff(seed),
        rank1_vs_dense(1000, seed),
        conjugacy(20, 100, seed),
        bartlett_mean(100_000, seed),
        concentration_trend(if opts.level == Level::Full { 1001 } else { 201 }, seed),
        metric_controls(seed),
        dataset_statistics(50_000, seed),
        determinism(seed),
    ]
}

fn random_spd(p: usize, rng: &mut RngStream) -> SpdMatrix {
    let a = rng.normal_vec(p * p);
    let mut m = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            m[i * p + j] = (0..p).map(|k| a[i * p + k] * a[j * p + k]).sum::<f64>() / p as f64;
        }
        m[i * p + i] += 0.5;
    }
    SpdMatrix::symmetrized(p, m).expect("diagonally shifted Gram matrix")
}

fn random_factor(p: usize, rng: &mut RngStream) -> LowerTriangular {
    let mut d = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..i {
            d[i * p + j] = 0.5 * rng.standard_normal();
        }
        d[i * p + i] = 0.3 + rng.next_f64();
    }
    LowerTriangular::new(p, d).expect("lower triangular")
}

struct Instance {
    post: LatentPosterior,
    z: Vec<f64>,
    hp: HyperpriorParams,
}

fn random_instance(p: usize, rng: &mut RngStream) -> Result<Instance> {
    let mu = rng.normal_vec(p);
    let post = LatentPosterior::new(mu, random_factor(p, rng), 0.0)?;
    let z = rng.normal_vec(p);
    let nu = p as f64 + 2.0 + 20.0 * rng.next_f64();
    let hp = HyperpriorParams::new(random_spd(p, rng), nu)?;
    Ok(Instance { post, z, hp })
}

/// Closed-form ELBO terms against Monte Carlo on shared random instances
/// (`p = 3`): the expected Gaussian KL under `q(Σ|z)` against a Bartlett
/// average, and the inverse-Wishart KL against the log-density-ratio average.
/// Returns the two outcomes in that order.
pub fn closed_form_vs_mc(instances: usize, samples: usize, seed: u64, tamper: f64) -> [CheckOutcome; 2] {
    let start = Instant::now();
    let run = || -> Result<[f64; 2]> {
        let root = RngStream::new(seed).derive(1);
        let mut worst = [0.0f64; 2];
        for i in 0..instances {
            let mut rng = root.derive(i as u64);
            let inst = random_instance(3, &mut rng)?;
            let e = chyvae_elbo_exact(&[0.5], &inst.post, &inst.z, &inst.hp, &[0.5], samples, &mut rng)?;
            worst[0] = worst[0].max(e.gaussian_kl_mc.expect("mc requested").z_score(e.gaussian_kl + tamper));
            worst[1] = worst[1].max(e.iw_kl_mc.expect("mc requested").z_score(e.iw_kl));
        }
        Ok(worst)
    };
    let result = run();
    let names = ["gaussian-term-mc", "iw-kl-mc"];
    std::array::from_fn(|t| {
        let r = match &result {
            Ok(w) => Ok((w[t] < 3.0, format!("max |z| = {:.2} SE over {instances} instances, {samples} samples", w[t]))),
            Err(e) => Err(crate::Error::Domain(e.to_string())),
        };
        CheckOutcome::timed(names[t], start, r)
    })
}

/// `KL(IG(a1, b1) ‖ IG(a0, b0))` with rate parameters, via the equivalent
/// gamma KL of the reciprocals.
pub fn inverse_gamma_kl(a1: f64, b1: f64, a0: f64, b0: f64) -> f64 {
    (a1 - a0) * digamma(a1) - ln_gamma(a1) + ln_gamma(a0) + a0 * (b1.ln() - b0.ln()) + a1 * (b0 - b1) / b1
}

/// At `p = 1`, `W⁻¹(ψ, ν)` is `IG(ν/2, ψ/2)`.
pub fn iw_kl_scalar_oracle(instances: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed).derive(3);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (psi, nu) = (rng.uniform(0.1, 10.0), rng.uniform(2.1, 50.0));
            let (phi, lambda) = (rng.uniform(0.1, 10.0), rng.uniform(2.1, 50.0));
            let hp = HyperpriorParams::new(SpdMatrix::new(1, vec![psi])?, nu)?;
            let got = iw_kl(&SpdMatrix::new(1, vec![phi])?, lambda, &hp)?;
            let want = inverse_gamma_kl(lambda / 2.0, phi / 2.0, nu / 2.0, psi / 2.0);
            worst = worst.max((got - want).abs());
        }
        Ok((worst < 1e-10, format!("max |diff| = {worst:.2e} over {instances} instances")))
    };
    CheckOutcome::timed("iw-kl-scalar", start, run())
}

/// Every parameter gradient of the full training loss (D = 16, p = 3, two
/// hidden layers of 8) against central differences.
pub fn gradient_vs_finite_diff(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let (d, p, n) = (16, 3, 4);
        let mc = ModelConfig::new(d, vec![8, 8], p, EncoderMode::Chyvae)?;
        let mut rng = RngStream::new(seed).derive(4);
        let mut params = init_params(&mc, &mut rng);
        let hp = HyperpriorParams::from_target_covariance(&SpdMatrix::identity(p), 6.0)?;
        let objective = Objective::Chyvae(hp);
        let xs: Vec<f64> = (0..n * d).map(|_| rng.next_f64()).collect();
        let eps = rng.normal_vec(n * p);
        let grads = evaluate_batch(&params, &objective, &xs, n, &eps, true)?.grads.expect("requested");
        let loss = |params: &crate::nn::ModelParams| -> Result<f64> {
            Ok(-evaluate_batch(params, &objective, &xs, n, &eps, false)?.breakdown.total)
        };
        let h = 1e-5;
        let (mut checked, mut failures, mut worst_abs, mut worst_rel) = (0usize, 0usize, 0.0f64, 0.0f64);
        for t in 0..params.tensors().len() {
            for j in 0..params.tensors()[t].tensor.values.len() {
                let x0 = params.tensors()[t].tensor.values[j];
                params.tensors_mut()[t].tensor.values[j] = x0 + h;
                let fp = loss(&params)?;
                params.tensors_mut()[t].tensor.values[j] = x0 - h;
                let fm = loss(&params)?;
                params.tensors_mut()[t].tensor.values[j] = x0;
                let fd = (fp - fm) / (2.0 * h);
                let g = grads[t][j];
                let err = (g - fd).abs();
                worst_abs = worst_abs.max(err);
                if err > 1e-6 {
                    worst_rel = worst_rel.max(err / fd.abs().max(g.abs()));
                    if err > 1e-4 * fd.abs().max(g.abs()) {
                        failures += 1;
                    }
                }
                checked += 1;
            }
        }
        Ok((failures == 0, format!("{checked} parameters, {failures} outside 1e-4 rel / 1e-6 abs (max |diff| {worst_abs:.1e}, max rel {worst_rel:.1e} where |diff| > 1e-6)")))
    };
    CheckOutcome::timed("gradient-fd", start, run())
}

/// Rank-1 log-determinant and inverse against dense Cholesky, `p ∈ 2..=10`.
pub fn rank1_vs_dense(instances: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed).derive(5);
        let mut worst = 0.0f64;
        for i in 0..instances {
            let p = 2 + i % 9;
            let psi = random_spd(p, &mut rng);
            let z = rng.normal_vec(p);
            let psi_inv = spd_inverse(&psi)?;
            let phi = psi.add_outer(&z, 1.0)?;
            let ld = rank1_logdet(log_det_spd(&psi)?, &psi_inv, &z)?;
            worst = worst.max((ld - log_det_spd(&phi)?).abs());
            let inv = rank1_inverse(&psi_inv, &z)?;
            let dense = spd_inverse(&phi)?;
            for (a, b) in inv.as_slice().iter().zip(dense.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst < 1e-9, format!("max |diff| = {worst:.2e} over {instances} instances")))
    };
    CheckOutcome::timed("rank1-dense", start, run())
}

/// `log N(z; 0, Σ) + log W⁻¹(Σ; Ψ, ν) − log W⁻¹(Σ; Ψ + zzᵀ, ν + 1)` must not
/// depend on `Σ`.
pub fn conjugacy(instances: usize, per_instance: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed).derive(6);
        let mut worst = 0.0f64;
        for i in 0..instances {
            let p = 2 + i % 5;
            let hp = HyperpriorParams::new(random_spd(p, &mut rng), p as f64 + 1.0 + 10.0 * rng.next_f64())?;
            let z = rng.normal_vec(p);
            let post = hp.posterior_distribution(&z)?;
            let zero = vec![0.0; p];
            let mut vals = Vec::with_capacity(per_instance);
            for _ in 0..per_instance {
                let s = random_spd(p, &mut rng);
                vals.push(
                    mvn_log_pdf(&z, &zero, &s)? + crate::distributions::iw_log_pdf(&s, &hp)?
                        - crate::distributions::iw_log_pdf(&s, &post)?,
                );
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            worst = worst.max(var);
        }
        Ok((worst < 1e-16, format!("max variance = {worst:.2e} over {instances} instances × {per_instance}")))
    };
    CheckOutcome::timed("conjugacy", start, run())
}

/// Bartlett sample mean against `Ψ/(ν − p − 1)` at `p = 3, ν = 10`.
pub fn bartlett_mean(samples: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed).derive(7);
        let hp = HyperpriorParams::new(random_spd(3, &mut rng), 10.0)?;
        let mut acc = [0.0; 9];
        for _ in 0..samples {
            let s = iw_sample_bartlett(&hp, &mut rng)?;
            for (a, v) in acc.iter_mut().zip(s.as_slice()) {
                *a += v;
            }
        }
        let mean = SpdMatrix::symmetrized(3, acc.iter().map(|a| a / samples as f64).collect())?;
        let want = iw_mean(&hp)?;
        let rel = mean.frobenius_distance(&want) / want.frobenius_norm();
        Ok((rel < 0.02, format!("relative Frobenius error {rel:.4} at {samples} samples")))
    };
    CheckOutcome::timed("bartlett-mean", start, run())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median `‖Σ − I‖_F` of draws for each `ν`, with `Ψ = scale(ν)·I`.
pub fn median_distance_to_identity(p: usize, nus: &[f64], samples: usize, scale: impl Fn(f64) -> f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let eye = SpdMatrix::identity(p);
    nus.iter()
        .map(|&nu| {
            let hp = HyperpriorParams::new(SpdMatrix::scaled_identity(p, scale(nu)), nu)?;
            let d = (0..samples)
                .map(|_| Ok(iw_sample_bartlett(&hp, rng)?.frobenius_distance(&eye)))
                .collect::<Result<Vec<f64>>>()?;
            Ok(median(d))
        })
        .collect()
}

/// Draws concentrate around the target as `ν` grows, for `ν ∈ {10, 100, 1000}`.
/// At `p = 10` the mean-matched scale `ν − p − 1` is not positive at `ν = 10`,
/// so the target is placed at the mode (`Ψ = (ν + p + 1)I`); the mean-matched
/// construction is checked at `p = 5`.
pub fn concentration_trend(samples: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = RngStream::new(seed).derive(8);
        let nus = [10.0, 100.0, 1000.0];
        let strict = |m: &[f64]| m.windows(2).all(|w| w[1] < w[0]);
        let mode = median_distance_to_identity(10, &nus, samples, |nu| nu + 11.0, &mut rng)?;
        let mean = median_distance_to_identity(5, &nus, samples, |nu| nu - 6.0, &mut rng)?;
        let fmt = |m: &[f64]| m.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" > ");
        Ok((strict(&mode) && strict(&mean), format!("p=10: {}; p=5: {}", fmt(&mode), fmt(&mean))))
    };
    CheckOutcome::timed("concentration-trend", start, run())
}

/// Oracle encoder scores 1, noise stays in the chance band, and the score of
/// an untrained network is unchanged by rescaling or permuting its latents.
pub fn metric_controls(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let spec = FactorSpec::default();
        let src = FactorSource { cfg: CorrConfig::default(), spec: spec.clone(), height: 32, width: 32 };
        let cfg = MetricConfig { l: 50, m: 1000, b: 200, n: 200 };
        let root = RngStream::new(seed).derive(9);
        let oracle = metric_score(&mut FactorOracle::new(spec.clone()), &cfg, &src, &root)?.score;
        let noise = metric_score(&mut NoiseEncoder::new(10, seed), &cfg, &src, &root)?.score;

        let mc = ModelConfig::new(32 * 32, vec![64], 10, EncoderMode::Chyvae)?;
        let net = init_params(&mc, &mut root.derive(1));
        let base = metric_score(&mut net.clone(), &cfg, &src, &root)?.score;
        let mut rng = root.derive(2);
        let scales: Vec<f64> = (0..10).map(|_| rng.uniform(0.1, 10.0)).collect();
        let mut scaled = Transformed { inner: net.clone(), scales, perm: (0..10).collect() };
        let scaled = metric_score(&mut scaled, &cfg, &src, &root)?.score;
        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let mut permuted = Transformed { inner: net, scales: vec![1.0; 10], perm };
        let permuted = metric_score(&mut permuted, &cfg, &src, &root)?.score;

        let ok = oracle == 1.0 && (0.10..=0.40).contains(&noise) && scaled == base && permuted == base;
        Ok((ok, format!("oracle {oracle:.3}, noise {noise:.3}, untrained {base:.3} / scaled {scaled:.3} / permuted {permuted:.3}")))
    };
    CheckOutcome::timed("metric-controls", start, run())
}

/// Binned-factor correlations: positive within blocks and negligible across
/// blocks at `ρ = 0.7`, negligible everywhere at `ρ = 0`.
pub fn dataset_statistics(n: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let spec = FactorSpec::default();
        let corr = generate_dataset(n, &CorrConfig::new(0.7, 0.7)?, &spec, 32, 32, seed)?;
        let c = factor_correlations(&corr.factors);
        let cross = [(0, 2), (0, 3), (1, 2), (1, 3)].iter().map(|&(i, j)| c[i][j].abs()).fold(0.0, f64::max);
        let indep = generate_dataset(n, &CorrConfig::new(0.0, 0.0)?, &spec, 32, 32, seed)?;
        let max_indep = max_abs_correlation(&indep);
        let ok = c[0][1] > 0.3 && c[2][3] > 0.3 && cross < 0.05 && max_indep < 0.05;
        Ok((
            ok,
            format!(
                "n={n}: corr(x,y)={:.3}, corr(s,o)={:.3}, max cross {cross:.3}; independent max {max_indep:.3}",
                c[0][1], c[2][3]
            ),
        ))
    };
    CheckOutcome::timed("dataset-statistics", start, run())
}

pub fn max_abs_correlation(ds: &EllipseDataset) -> f64 {
    let c = factor_correlations(&ds.factors);
    let mut m = 0.0f64;
    for i in 0..NUM_FACTORS {
        for j in i + 1..NUM_FACTORS {
            m = m.max(c[i][j].abs());
        }
    }
    m
}

/// Factor independence of an existing dataset: every pairwise `|corr| < 0.05`.
pub fn dataset_independence(ds: &EllipseDataset) -> CheckOutcome {
    let start = Instant::now();
    let m = max_abs_correlation(ds);
    CheckOutcome::timed("data-independence", start, Ok((m < 0.05, format!("n={}: max |corr| = {m:.4}", ds.len()))))
}

fn bits(log: &[crate::trainer::LogRow]) -> Vec<[u64; 5]> {
    log.iter()
        .map(|r| [r.recon_sum.to_bits(), r.recon_per_pixel.to_bits(), r.gaussian_term.to_bits(), r.iw_term.to_bits(), r.total.to_bits()])
        .collect()
}

/// Identical seeds give identical dataset bytes and loss traces, and a
/// checkpoint round trip continues the trace exactly for 100 steps.
pub fn determinism(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let run = || -> Result<(bool, String)> {
        let spec = FactorSpec::default();
        let bytes = |s: u64| -> Result<Vec<u8>> {
            let mut out = Vec::new();
            generate_dataset(300, &CorrConfig::default(), &spec, 16, 16, s)?.write_to(&mut out)?;
            Ok(out)
        };
        let same_data = bytes(seed)? == bytes(seed)?;
        let ds = generate_dataset(300, &CorrConfig::default(), &spec, 16, 16, seed)?;
        let cfg = TrainConfig {
            model: ModelKind::Chyvae,
            nu: 10.0,
            sigma0: SpdMatrix::identity(3),
            latent_dim: 3,
            hidden: vec![32],
            batch_size: 10,
            steps: 150,
            eval_interval: 0,
            seed,
            ..TrainConfig::default()
        };
        let run_full = || -> Result<Vec<[u64; 5]>> {
            let mut t = Trainer::new(cfg.clone(), &ds)?;
            t.run(None)?;
            Ok(bits(t.log()))
        };
        let a = run_full()?;
        let same_trace = a == run_full()?;

        let mut first = Trainer::new(TrainConfig { steps: 50, ..cfg.clone() }, &ds)?;
        first.run(None)?;
        let mut buf = Vec::new();
        first.checkpoint().write_to(&mut buf)?;
        let ck = Checkpoint::read_from(&mut buf.as_slice())?;
        let mut resumed = Trainer::resume(cfg.clone(), &ds, ck)?;
        resumed.run(None)?;
        let cont = bits(resumed.log());
        let same_resume = cont.len() == 100 && cont[..] == a[50..];
        Ok((
            same_data && same_trace && same_resume,
            format!("dataset bytes equal: {same_data}, traces equal: {same_trace}, resume matches 100 steps: {same_resume}"),
        ))
    };
    CheckOutcome::timed("determinism", start, run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_gamma_kl_vanishes_at_equal_arguments() {
        assert!(inverse_gamma_kl(3.0, 2.0, 3.0, 2.0).abs() < 1e-14);
        assert!(inverse_gamma_kl(3.0, 2.0, 4.0, 1.0) > 0.0);
    }

    #[test]
    fn tampered_constant_is_caught() {
        let [clean, _] = closed_form_vs_mc(2, 20_000, 1, 0.0);
        assert!(clean.passed, "{}", clean.line());
        let [tampered, iw] = closed_form_vs_mc(2, 20_000, 1, 0.5);
        assert!(!tampered.passed, "{}", tampered.line());
        assert!(iw.passed, "{}", iw.line());
    }

    #[test]
    fn fast_checks_pass() {
        for c in [iw_kl_scalar_oracle(50, 0), rank1_vs_dense(200, 0), conjugacy(5, 50, 0), determinism(0)] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn median_is_order_free() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
