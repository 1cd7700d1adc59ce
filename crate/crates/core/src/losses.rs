//! Training objectives: Bernoulli reconstruction, the hyperprior ELBO in its
//! constant-free and constant-inclusive forms, and the β-VAE ELBO.
//!
//! All objectives are lower bounds to be maximized; training minimizes the
//! negated batch mean.

use crate::autodiff::{softplus_scalar, Tape, Var};
use crate::distributions::{
    conjugate_posterior, gaussian_kl, iw_kl_posterior, iw_log_pdf, iw_sample_bartlett, mv_digamma, HyperpriorParams,
    RngStream,
};
use crate::error::{Error, Result};
use crate::linalg::{rank1_inverse, rank1_logdet};
use crate::nn::{decode_tape, encode_tape, reparam_tape, EncoderMode, ExamplePosterior, LatentPosterior, ModelParams};

/// Objective components. `total = recon − gaussian_term − iw_term`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    /// Bernoulli log-likelihood (≤ 0).
    pub recon: f64,
    /// Expected Gaussian KL (β-weighted KL for the β-VAE).
    pub gaussian_term: f64,
    /// Inverse-Wishart KL (zero for the β-VAE).
    pub iw_term: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn new(recon: f64, gaussian_term: f64, iw_term: f64) -> Self {
        Self { recon, gaussian_term, iw_term, total: recon - gaussian_term - iw_term }
    }

    pub fn mean(items: &[ElboBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let s = |f: fn(&ElboBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(s(|e| e.recon), s(|e| e.gaussian_term), s(|e| e.iw_term))
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.gaussian_term.is_finite() && self.iw_term.is_finite() && self.total.is_finite()
    }
}

/// `Σ x log x̂ + (1−x) log(1−x̂)`.
pub fn bernoulli_recon(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::dims(x.len(), x_hat.len()));
    }
    let mut s = 0.0;
    for (&xi, &yi) in x.iter().zip(x_hat) {
        if !(0.0..=1.0).contains(&xi) {
            return Err(Error::domain("targets must lie in [0, 1]"));
        }
        if !(yi > 0.0 && yi < 1.0) {
            return Err(Error::domain("Bernoulli means must lie strictly inside (0, 1)"));
        }
        s += xi * yi.ln() + (1.0 - xi) * (-yi).ln_1p();
    }
    Ok(s)
}

/// [`bernoulli_recon`] with `x̂ = sigmoid(logits)`, evaluated as `Σ x·l − softplus(l)`.
pub fn bernoulli_recon_logits(x: &[f64], logits: &[f64]) -> Result<f64> {
    if x.len() != logits.len() {
        return Err(Error::dims(x.len(), logits.len()));
    }
    Ok(x.iter().zip(logits).map(|(xi, l)| xi * l - softplus_scalar(*l)).sum())
}

fn check_posterior(post: &LatentPosterior, z: &[f64], p: usize) -> Result<()> {
    if post.dim() != p || z.len() != p {
        return Err(Error::dims(p, format!("posterior {} / z {}", post.dim(), z.len())));
    }
    Ok(())
}

/// Per-example hyperprior ELBO without additive constants, with the `Φ = Ψ + zzᵀ`
/// terms evaluated through rank-1 updates.
pub fn chyvae_loss(
    x: &[f64],
    post: &LatentPosterior,
    z: &[f64],
    hp: &HyperpriorParams,
    x_hat: &[f64],
) -> Result<ElboBreakdown> {
    let p = hp.dim();
    check_posterior(post, z, p)?;
    let recon = bernoulli_recon(x, x_hat)?;
    let (nu, lambda) = (hp.nu(), hp.nu() + 1.0);
    let phi_inv = rank1_inverse(hp.psi_inv(), z)?;
    let logdet_phi = rank1_logdet(hp.logdet_psi(), hp.psi_inv(), z)?;
    let tr_sigma = post.sigma.trace_product(&phi_inv)?;
    let tr_mu = phi_inv.quad_form(&post.mu)?;
    let tr_psi = hp.psi().trace_product(&phi_inv)?;
    // log|Σ̃| from the factor alone; the jitter only enters the trace
    let logdet_sigma = post.chol.log_det_gram();
    let gaussian = 0.5 * (-logdet_sigma + logdet_phi + lambda * (tr_sigma + tr_mu));
    let iw = 0.5 * nu * logdet_phi + 0.5 * lambda * tr_psi;
    Ok(ElboBreakdown::new(recon, gaussian, iw))
}

/// Monte-Carlo mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std_error: (var / n).sqrt(), samples: xs.len() }
    }

    /// Number of standard errors separating the estimate from `value`.
    pub fn z_score(&self, value: f64) -> f64 {
        (value - self.mean).abs() / self.std_error.max(f64::MIN_POSITIVE)
    }
}

/// Constant-inclusive ELBO terms with optional Monte-Carlo cross-checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactElbo {
    pub recon: f64,
    /// `E_{q(Σ|z)} KL(N(μ̃, Σ̃) ‖ N(0, Σ))` in closed form.
    pub gaussian_kl: f64,
    /// `KL(W⁻¹(Φ, λ) ‖ W⁻¹(Ψ, ν))` in closed form.
    pub iw_kl: f64,
    pub total: f64,
    pub gaussian_kl_mc: Option<McEstimate>,
    pub iw_kl_mc: Option<McEstimate>,
}

/// Constant-inclusive ELBO for one example. With `mc_samples ≥ 2`, both KL
/// terms are also estimated from Bartlett draws `Σ ~ W⁻¹(Φ, λ)`.
pub fn chyvae_elbo_exact(
    x: &[f64],
    post: &LatentPosterior,
    z: &[f64],
    hp: &HyperpriorParams,
    x_hat: &[f64],
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<ExactElbo> {
    let p = hp.dim();
    check_posterior(post, z, p)?;
    let recon = bernoulli_recon(x, x_hat)?;
    let q = conjugate_posterior(hp, z)?;
    let lambda = q.lambda;
    let pf = p as f64;

    let tr = q.phi_inv.trace_product(&post.sigma)? + q.phi_inv.quad_form(&post.mu)?;
    let gaussian_exact = 0.5 * (-post.chol.log_det_gram() + q.phi_logdet + lambda * tr)
        + 0.5 * (-pf - pf * std::f64::consts::LN_2 - mv_digamma(p, lambda / 2.0)?);
    let iw_exact = iw_kl_posterior(&q, hp)?;

    let (mut gaussian_kl_mc, mut iw_kl_mc) = (None, None);
    if mc_samples >= 2 {
        let post_iw = hp.posterior_distribution(z)?;
        let zero = vec![0.0; p];
        let mut g = Vec::with_capacity(mc_samples);
        let mut w = Vec::with_capacity(mc_samples);
        for _ in 0..mc_samples {
            let s = iw_sample_bartlett(&post_iw, rng)?;
            g.push(gaussian_kl(&post.mu, &post.sigma, &zero, &s)?);
            w.push(iw_log_pdf(&s, &post_iw)? - iw_log_pdf(&s, hp)?);
        }
        gaussian_kl_mc = Some(McEstimate::from_samples(&g));
        iw_kl_mc = Some(McEstimate::from_samples(&w));
    }
    Ok(ExactElbo {
        recon,
        gaussian_kl: gaussian_exact,
        iw_kl: iw_exact,
        total: recon - gaussian_exact - iw_exact,
        gaussian_kl_mc,
        iw_kl_mc,
    })
}

/// `recon − β·KL(N(μ̃, diag σ̃²) ‖ N(0, I))`, with `σ̃` the diagonal of the factor.
pub fn beta_vae_loss(x: &[f64], post: &LatentPosterior, z: &[f64], beta: f64, x_hat: &[f64]) -> Result<ElboBreakdown> {
    let p = post.dim();
    check_posterior(post, z, p)?;
    for i in 0..p {
        for j in 0..i {
            if post.chol.get(i, j) != 0.0 {
                return Err(Error::domain("β-VAE posterior must be diagonal"));
            }
        }
    }
    let recon = bernoulli_recon(x, x_hat)?;
    let kl: f64 = post
        .chol
        .diag()
        .zip(&post.mu)
        .map(|(s, m)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum();
    Ok(ElboBreakdown::new(recon, beta * kl, 0.0))
}

/// Which bound a model is trained on.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Chyvae(HyperpriorParams),
    BetaVae { beta: f64 },
}

impl Objective {
    pub fn encoder_mode(&self) -> EncoderMode {
        match self {
            Objective::Chyvae(_) => EncoderMode::Chyvae,
            Objective::BetaVae { .. } => EncoderMode::Diagonal,
        }
    }
}

/// Constants shared by every example of a batch.
pub struct ChyvaeTapeContext {
    psi_inv: Var,
    trace_psi_inv: f64,
    logdet_psi: f64,
    nu: f64,
    p: usize,
    jitter: f64,
}

impl ChyvaeTapeContext {
    pub fn new(tape: &mut Tape, hp: &HyperpriorParams, jitter: f64) -> Result<Self> {
        let p = hp.dim();
        Ok(Self {
            psi_inv: tape.constant(vec![p, p], hp.psi_inv().as_slice().to_vec())?,
            trace_psi_inv: hp.psi_inv().trace(),
            logdet_psi: hp.logdet_psi(),
            nu: hp.nu(),
            p,
            jitter,
        })
    }
}

/// `(gaussian_term, iw_term)` on the tape for one example with factor `L̃`
/// (`[p, p]`), mean `μ̃` and latent sample `z`, using
/// `Φ⁻¹ = Ψ⁻¹ − uuᵀ/(1+s)` and `log|Φ| = log|Ψ| + log(1+s)`, `u = Ψ⁻¹z`, `s = zᵀu`.
pub fn chyvae_terms_tape(tape: &mut Tape, ctx: &ChyvaeTapeContext, post: &ExamplePosterior, z: Var) -> Result<(Var, Var)> {
    let (nu, lambda) = (ctx.nu, ctx.nu + 1.0);
    let l = post.scale;
    let u = tape.matvec(ctx.psi_inv, z)?;
    let s = tape.dot(z, u)?;
    let one_plus_s = tape.add_scalar(s, 1.0);
    let inv = tape.recip(one_plus_s);
    let log1p = tape.log(one_plus_s);
    let logdet_phi = tape.add_scalar(log1p, ctx.logdet_psi);

    // Tr(Σ̃Φ⁻¹) with Σ̃ = L̃L̃ᵀ + jitter·I
    let psi_inv_l = tape.matmul(ctx.psi_inv, l)?;
    let ll = tape.mul(l, psi_inv_l)?;
    let tr_ll = tape.sum(ll);
    let lt = tape.transpose(l)?;
    let ltu = tape.matvec(lt, u)?;
    let q_ll = tape.dot(ltu, ltu)?;
    let q_ll = tape.mul(q_ll, inv)?;
    let mut tr_sigma = tape.sub(tr_ll, q_ll)?;
    if ctx.jitter != 0.0 {
        let uu = tape.dot(u, u)?;
        let uu = tape.mul(uu, inv)?;
        let j = tape.scalar_mul(uu, -ctx.jitter);
        let j = tape.add_scalar(j, ctx.jitter * ctx.trace_psi_inv);
        tr_sigma = tape.add(tr_sigma, j)?;
    }

    // Tr(μ̃μ̃ᵀΦ⁻¹) = μ̃ᵀΨ⁻¹μ̃ − (uᵀμ̃)²/(1+s)
    let w = tape.matvec(ctx.psi_inv, post.mu)?;
    let a = tape.dot(post.mu, w)?;
    let b = tape.dot(u, post.mu)?;
    let b2 = tape.mul(b, b)?;
    let b2 = tape.mul(b2, inv)?;
    let tr_mu = tape.sub(a, b2)?;

    // Tr(ΨΦ⁻¹) = p − s/(1+s)
    let s_ratio = tape.mul(s, inv)?;
    let tr_psi = tape.scalar_mul(s_ratio, -1.0);
    let tr_psi = tape.add_scalar(tr_psi, ctx.p as f64);

    let d = tape.diag(l)?;
    let log_d = tape.log(d);
    let half_logdet_sigma = tape.sum(log_d);

    let tr = tape.add(tr_sigma, tr_mu)?;
    let tr = tape.scalar_mul(tr, 0.5 * lambda);
    let half_phi = tape.scalar_mul(logdet_phi, 0.5);
    let g = tape.sub(half_phi, half_logdet_sigma)?;
    let gaussian = tape.add(g, tr)?;

    let iw_a = tape.scalar_mul(logdet_phi, 0.5 * nu);
    let iw_b = tape.scalar_mul(tr_psi, 0.5 * lambda);
    let iw = tape.add(iw_a, iw_b)?;
    Ok((gaussian, iw))
}

/// Closed-form `KL(N(μ̃, diag σ̃²) ‖ N(0, I))` on the tape; `post.scale` holds `σ̃`.
pub fn diagonal_kl_tape(tape: &mut Tape, post: &ExamplePosterior) -> Result<Var> {
    let p = tape.shape(post.mu)[0] as f64;
    let var = tape.mul(post.scale, post.scale)?;
    let sv = tape.sum(var);
    let mm = tape.dot(post.mu, post.mu)?;
    let log_s = tape.log(post.scale);
    let sl = tape.sum(log_s);
    let sl = tape.scalar_mul(sl, -2.0);
    let a = tape.add(sv, mm)?;
    let a = tape.add(a, sl)?;
    let a = tape.add_scalar(a, -p);
    Ok(tape.scalar_mul(a, 0.5))
}

/// Summed Bernoulli log-likelihood of a `[B, D]` target batch under `[B, D]` logits.
pub fn recon_logits_tape(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
    let xl = tape.mul(x, logits)?;
    let a = tape.sum(xl);
    let sp = tape.softplus(logits);
    let b = tape.sum(sp);
    tape.sub(a, b)
}

/// Batch objective and, optionally, gradients of the minimized loss `−total`.
#[derive(Clone, Debug)]
pub struct BatchEvaluation {
    /// Batch means.
    pub breakdown: ElboBreakdown,
    /// One entry per parameter tensor, in storage order.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Runs encoder → reparameterization → decoder → objective on `n` images
/// (`xs`, row-major) with standard-normal noise `eps` (`n × p`).
pub fn evaluate_batch(
    params: &ModelParams,
    objective: &Objective,
    xs: &[f64],
    n: usize,
    eps: &[f64],
    with_grad: bool,
) -> Result<BatchEvaluation> {
    let cfg = params.config();
    let (d, p) = (cfg.input_dim, cfg.latent_dim);
    if objective.encoder_mode() != cfg.mode {
        return Err(Error::Config(format!(
            "objective needs a {} encoder, model has {}",
            objective.encoder_mode().as_str(),
            cfg.mode.as_str()
        )));
    }
    if n == 0 || xs.len() != n * d {
        return Err(Error::dims(n * d, xs.len()));
    }
    if eps.len() != n * p {
        return Err(Error::dims(n * p, eps.len()));
    }
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, with_grad);
    let x = tape.constant(vec![n, d], xs.to_vec())?;
    let rows = encode_tape(&mut tape, &pv, cfg, x)?;
    let zs = rows
        .iter()
        .enumerate()
        .map(|(i, r)| reparam_tape(&mut tape, r, cfg.mode, &eps[i * p..(i + 1) * p]))
        .collect::<Result<Vec<_>>>()?;
    let z = tape.concat(&zs)?;
    let z = tape.reshape(z, vec![n, p])?;
    let logits = decode_tape(&mut tape, &pv, cfg, z)?;
    let recon = recon_logits_tape(&mut tape, x, logits)?;

    let (mut g_terms, mut iw_terms) = (Vec::with_capacity(n), Vec::with_capacity(n));
    match objective {
        Objective::Chyvae(hp) => {
            if hp.dim() != p {
                return Err(Error::dims(p, hp.dim()));
            }
            let ctx = ChyvaeTapeContext::new(&mut tape, hp, crate::nn::COVARIANCE_JITTER)?;
            for (r, zi) in rows.iter().zip(&zs) {
                let (g, w) = chyvae_terms_tape(&mut tape, &ctx, r, *zi)?;
                g_terms.push(g);
                iw_terms.push(w);
            }
        }
        Objective::BetaVae { beta } => {
            for r in &rows {
                let kl = diagonal_kl_tape(&mut tape, r)?;
                g_terms.push(tape.scalar_mul(kl, *beta));
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let recon = tape.scalar_mul(recon, inv_n);
    let g_all = tape.concat(&g_terms)?;
    let g_sum = tape.sum(g_all);
    let gaussian = tape.scalar_mul(g_sum, inv_n);
    let mut penalty = gaussian;
    let mut iw_value = 0.0;
    if !iw_terms.is_empty() {
        let w_all = tape.concat(&iw_terms)?;
        let w_sum = tape.sum(w_all);
        let iw = tape.scalar_mul(w_sum, inv_n);
        iw_value = tape.scalar(iw);
        penalty = tape.add(gaussian, iw)?;
    }
    let total = tape.sub(recon, penalty)?;
    let loss = tape.scalar_mul(total, -1.0);
    let breakdown = ElboBreakdown::new(tape.scalar(recon), tape.scalar(gaussian), iw_value);

    let grads = if with_grad {
        let g = tape.backward(loss)?;
        Some(pv.all().iter().map(|v| g.get(*v)).collect())
    } else {
        None
    };
    Ok(BatchEvaluation { breakdown, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid_scalar;
    use crate::distributions::{gaussian_reparam, iw_kl};
    use crate::linalg::test_util::{finite_diff, random_spd, random_vec};
    use crate::linalg::{cholesky, log_det_spd, spd_inverse, LowerTriangular, SpdMatrix};
    use crate::nn::{decode_batch, encode_batch, init_params, ModelConfig};

    fn random_factor(p: usize, rng: &mut RngStream) -> LowerTriangular {
        let mut d = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..i {
                d[i * p + j] = 0.5 * rng.standard_normal();
            }
            d[i * p + i] = 0.3 + rng.next_f64();
        }
        LowerTriangular::new(p, d).unwrap()
    }

    /// Explicit `Φ`, dense inverse and log-determinant.
    fn chyvae_loss_dense(x: &[f64], post: &LatentPosterior, z: &[f64], hp: &HyperpriorParams, x_hat: &[f64]) -> ElboBreakdown {
        let phi = hp.psi().add_outer(z, 1.0).unwrap();
        let phi_inv = spd_inverse(&phi).unwrap();
        let ld = log_det_spd(&phi).unwrap();
        let mm = SpdMatrix::diagonal(&vec![0.0; z.len()]).add_outer(&post.mu, 1.0).unwrap();
        let s = post.sigma.add(&mm).unwrap();
        let lam = hp.nu() + 1.0;
        let mut recon = 0.0;
        for (a, b) in x.iter().zip(x_hat) {
            recon += a * b.ln() + (1.0 - a) * (1.0 - b).ln();
        }
        let g = 0.5 * (-post.chol.log_det_gram() + ld + lam * s.trace_product(&phi_inv).unwrap());
        let w = 0.5 * hp.nu() * ld + 0.5 * lam * hp.psi().trace_product(&phi_inv).unwrap();
        ElboBreakdown::new(recon, g, w)
    }

    #[test]
    fn bernoulli_examples() {
        let v = bernoulli_recon(&[0.5; 4], &[0.5; 4]).unwrap();
        assert!((v - 4.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((v + 2.77259).abs() < 1e-5);
        let x = [1.0, 0.0, 1.0];
        let near = bernoulli_recon(&x, &[1.0 - 1e-9, 1e-9, 1.0 - 1e-9]).unwrap();
        assert!(near < 0.0 && near > -1e-8);
        assert!(bernoulli_recon(&x, &[1.0, 0.5, 0.5]).is_err());
        assert!(bernoulli_recon(&x, &[0.0, 0.5, 0.5]).is_err());
        assert!(bernoulli_recon(&x, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bernoulli_matches_direct_sum_and_logit_route() {
        let mut rng = RngStream::new(12);
        let x: Vec<f64> = (0..50).map(|_| rng.next_f64()).collect();
        let logits: Vec<f64> = (0..50).map(|_| 3.0 * rng.standard_normal()).collect();
        let y: Vec<f64> = logits.iter().map(|l| sigmoid_scalar(*l)).collect();
        let mut direct = 0.0;
        for i in 0..50 {
            direct += x[i] * y[i].ln() + (1.0 - x[i]) * (1.0 - y[i]).ln();
        }
        let a = bernoulli_recon(&x, &y).unwrap();
        let b = bernoulli_recon_logits(&x, &logits).unwrap();
        assert!((a - direct).abs() < 1e-12);
        assert!((b - direct).abs() < 1e-10);
    }

    #[test]
    fn rank1_route_matches_dense_route() {
        let mut rng = RngStream::new(77);
        for case in 0..1000 {
            let p = 2 + case % 9;
            let psi = random_spd(p, &mut rng);
            let nu = p as f64 + 1.0 + 20.0 * rng.next_f64();
            let hp = HyperpriorParams::new(psi, nu).unwrap();
            let post = LatentPosterior::new(random_vec(p, 1.0, &mut rng), random_factor(p, &mut rng), 1e-4).unwrap();
            let z = random_vec(p, 2.0, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let xh: Vec<f64> = (0..6).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
            let a = chyvae_loss(&x, &post, &z, &hp, &xh).unwrap();
            let b = chyvae_loss_dense(&x, &post, &z, &hp, &xh);
            for (u, v) in [(a.gaussian_term, b.gaussian_term), (a.iw_term, b.iw_term), (a.total, b.total)] {
                assert!((u - v).abs() < 1e-9 * v.abs().max(1.0), "case {case}: {u} vs {v}");
            }
        }
    }

    /// Per-example loss on the tape from free leaves `(μ̃, factor head, logits, z)`.
    fn tape_example(inputs: &[f64], x: &[f64], hp: &HyperpriorParams, p: usize, with_grad: bool) -> (f64, Option<Vec<f64>>) {
        let d = x.len();
        let mut t = Tape::new();
        let all = t.param(vec![inputs.len()], inputs.to_vec()).unwrap();
        let mu = t.slice(all, 0, p).unwrap();
        let head = t.slice(all, p, p * p).unwrap();
        let logits = t.slice(all, p + p * p, d).unwrap();
        let logits = t.reshape(logits, vec![1, d]).unwrap();
        let z = t.slice(all, p + p * p + d, p).unwrap();
        let l = t.lower_triangular_assemble(head).unwrap();
        let xv = t.constant(vec![1, d], x.to_vec()).unwrap();
        let ctx = ChyvaeTapeContext::new(&mut t, hp, 1e-4).unwrap();
        let (g, w) = chyvae_terms_tape(&mut t, &ctx, &ExamplePosterior { mu, scale: l }, z).unwrap();
        let r = recon_logits_tape(&mut t, xv, logits).unwrap();
        let pen = t.add(g, w).unwrap();
        let total = t.sub(r, pen).unwrap();
        let grad = with_grad.then(|| t.backward(total).unwrap().get(all));
        (t.scalar(total), grad)
    }

    /// The same quantity through the plain rank-1 path.
    fn plain_example(inputs: &[f64], x: &[f64], hp: &HyperpriorParams, p: usize) -> f64 {
        let d = x.len();
        let mu = inputs[..p].to_vec();
        let head = &inputs[p..p + p * p];
        let mut l = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..i {
                l[i * p + j] = head[i * p + j];
            }
            l[i * p + i] = softplus_scalar(head[i * p + i]);
        }
        let post = LatentPosterior::new(mu, LowerTriangular::new(p, l).unwrap(), 1e-4).unwrap();
        let xh: Vec<f64> = inputs[p + p * p..p + p * p + d].iter().map(|v| sigmoid_scalar(*v)).collect();
        let z = &inputs[p + p * p + d..];
        chyvae_loss(x, &post, z, hp, &xh).unwrap().total
    }

    #[test]
    fn tape_loss_gradient_matches_finite_differences() {
        let (d, p) = (16, 3);
        let hp = HyperpriorParams::new(SpdMatrix::scaled_identity(p, 2.0), 6.0).unwrap();
        let mut rng = RngStream::new(21);
        let x: Vec<f64> = (0..d).map(|_| rng.next_f64()).collect();
        let inputs: Vec<f64> = (0..p + p * p + d + p).map(|_| rng.standard_normal()).collect();
        let (value, grad) = tape_example(&inputs, &x, &hp, p, true);
        assert!((value - plain_example(&inputs, &x, &hp, p)).abs() < 1e-10);
        let fd = finite_diff(&inputs, 1e-5, |v| plain_example(v, &x, &hp, p));
        for (i, (a, f)) in grad.unwrap().iter().zip(&fd).enumerate() {
            assert!((a - f).abs() <= 1e-4 * f.abs().max(1e-2), "input {i}: {a} vs {f}");
        }
    }

    /// Off-diagonal part `O` of a 2×2 block with correlation `rho` and unit variances.
    fn correlated_pair(rho: f64, p: usize) -> (LatentPosterior, LatentPosterior) {
        let mut diag = vec![0.0; p * p];
        let mut corr = vec![0.0; p * p];
        for i in 0..p {
            diag[i * p + i] = 1.0;
            corr[i * p + i] = 1.0;
        }
        corr[p] = rho;
        corr[p + 1] = (1.0 - rho * rho).sqrt();
        let mu = vec![0.2; p];
        (
            LatentPosterior::new(mu.clone(), LowerTriangular::new(p, diag).unwrap(), 0.0).unwrap(),
            LatentPosterior::new(mu, LowerTriangular::new(p, corr).unwrap(), 0.0).unwrap(),
        )
    }

    #[test]
    fn diagonal_posterior_scores_higher_than_correlated() {
        let p = 4;
        let (diag, corr) = correlated_pair(0.9, p);
        let x = [0.3, 0.7];
        let xh = [0.4, 0.6];
        // at z = 0 only the log-determinant separates the two; a z along the
        // correlated direction favours the correlated posterior until ν is large
        let cases = [(vec![0.0; p], vec![p as f64 + 2.0, 50.0, 500.0]), (vec![0.5, 0.5, -0.2, 0.1], vec![50.0, 500.0, 5000.0])];
        for (z, nus) in cases {
            for nu in nus {
                let hp = HyperpriorParams::from_target_covariance(&SpdMatrix::identity(p), nu).unwrap();
                let a = chyvae_loss(&x, &diag, &z, &hp, &xh).unwrap();
                let b = chyvae_loss(&x, &corr, &z, &hp, &xh).unwrap();
                assert_eq!(a.recon, b.recon);
                assert!(a.total > b.total, "nu {nu}: {} vs {}", a.total, b.total);
            }
        }
    }

    #[test]
    fn covariance_penalty_grows_with_degrees_of_freedom() {
        let p = 4;
        let (diag, corr) = correlated_pair(0.9, p);
        let (x, xh) = ([0.5], [0.5]);
        // latents with zᵀOz ≥ 0, O the off-diagonal part of the correlated Σ̃
        for z in [vec![0.0; 4], vec![0.5, 0.5, -0.2, 0.1], vec![1.0, 2.0, 0.0, 0.0]] {
            let mut last = f64::NEG_INFINITY;
            for nu in [p as f64 + 2.0, 50.0, 500.0] {
                let hp = HyperpriorParams::from_target_covariance(&SpdMatrix::identity(p), nu).unwrap();
                let gap = chyvae_loss(&x, &diag, &z, &hp, &xh).unwrap().total
                    - chyvae_loss(&x, &corr, &z, &hp, &xh).unwrap().total;
                assert!(gap >= last - 1e-12, "z {z:?} nu {nu}: {gap} < {last}");
                last = gap;
            }
        }
    }

    fn exact_instance(seed: u64) -> (LatentPosterior, Vec<f64>, HyperpriorParams) {
        let mut rng = RngStream::new(seed);
        let p = 3;
        let post = LatentPosterior::new(random_vec(p, 0.7, &mut rng), random_factor(p, &mut rng), 0.0).unwrap();
        let z = gaussian_reparam(&post.mu, &post.chol, &rng.normal_vec(p)).unwrap();
        let hp = HyperpriorParams::new(random_spd(p, &mut rng), 4.0 + 10.0 * rng.next_f64()).unwrap();
        (post, z, hp)
    }

    #[test]
    fn exact_terms_match_monte_carlo() {
        for seed in 0..3 {
            let (post, z, hp) = exact_instance(seed);
            let mut rng = RngStream::new(100 + seed);
            let e = chyvae_elbo_exact(&[0.5], &post, &z, &hp, &[0.5], 100_000, &mut rng).unwrap();
            assert!(e.gaussian_kl >= -1e-9 && e.iw_kl >= -1e-9);
            let g = e.gaussian_kl_mc.unwrap();
            let w = e.iw_kl_mc.unwrap();
            assert!(g.z_score(e.gaussian_kl) < 3.0, "seed {seed}: {} vs {g:?}", e.gaussian_kl);
            assert!(w.z_score(e.iw_kl) < 3.0, "seed {seed}: {} vs {w:?}", e.iw_kl);
        }
    }

    #[test]
    fn exact_iw_term_at_zero_latent_only_shifts_dof() {
        let (post, _, hp) = exact_instance(5);
        let z = vec![0.0; 3];
        let e = chyvae_elbo_exact(&[0.5], &post, &z, &hp, &[0.5], 0, &mut RngStream::new(0)).unwrap();
        let want = iw_kl(hp.psi(), hp.nu() + 1.0, &hp).unwrap();
        assert!((e.iw_kl - want).abs() < 1e-12);
        assert!(e.gaussian_kl_mc.is_none());
    }

    #[test]
    fn training_and_exact_forms_differ_by_a_constant() {
        let (post, _, hp) = exact_instance(9);
        let p = 3;
        let lower: Vec<usize> = (0..p).flat_map(|i| (0..=i).map(move |j| i * p + j)).collect();
        // free inputs: μ̃, lower-triangular factor entries, z
        let mut v = post.mu.clone();
        v.extend(lower.iter().map(|&k| post.chol.as_slice()[k]));
        v.extend(random_vec(p, 1.0, &mut RngStream::new(4)));
        let nl = lower.len();
        let gap = |v: &[f64]| {
            let mut l = vec![0.0; p * p];
            for (k, &idx) in lower.iter().enumerate() {
                l[idx] = v[p + k];
            }
            let post = LatentPosterior::new(v[..p].to_vec(), LowerTriangular::new(p, l).unwrap(), 0.0).unwrap();
            let z = &v[p + nl..];
            let a = chyvae_loss(&[0.5], &post, z, &hp, &[0.5]).unwrap().total;
            let b = chyvae_elbo_exact(&[0.5], &post, z, &hp, &[0.5], 0, &mut RngStream::new(0)).unwrap().total;
            a - b
        };
        for (i, g) in finite_diff(&v, 1e-5, gap).iter().enumerate() {
            assert!(g.abs() < 1e-7, "input {i}: {g}");
        }
        let v2: Vec<f64> = v.iter().map(|x| x * 1.1).collect();
        assert!((gap(&v) - gap(&v2)).abs() < 1e-10);
    }

    #[test]
    fn beta_vae_examples() {
        let std_normal = LatentPosterior::new(vec![0.0; 3], LowerTriangular::identity(3), 0.0).unwrap();
        let (x, xh) = ([0.2, 0.9], [0.3, 0.8]);
        let r = bernoulli_recon(&x, &xh).unwrap();
        let b = beta_vae_loss(&x, &std_normal, &[0.0; 3], 1.0, &xh).unwrap();
        assert_eq!(b.gaussian_term, 0.0);
        let shifted = LatentPosterior::new(vec![1.0, 0.0, 0.0], LowerTriangular::identity(3), 0.0).unwrap();
        let b = beta_vae_loss(&x, &shifted, &[0.0; 3], 1.0, &xh).unwrap();
        assert!((b.gaussian_term - 0.5).abs() < 1e-15);
        let b = beta_vae_loss(&x, &shifted, &[0.0; 3], 0.0, &xh).unwrap();
        assert_eq!(b.total, r);
        assert_eq!(b.recon, r);
        let full = LatentPosterior::new(vec![0.0; 2], cholesky(&SpdMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap()).unwrap(), 0.0).unwrap();
        assert!(beta_vae_loss(&x, &full, &[0.0; 2], 1.0, &xh).is_err());
    }

    #[test]
    fn batch_evaluation_matches_per_example_functions() {
        let cfg = ModelConfig::new(16, vec![8, 8], 3, EncoderMode::Chyvae).unwrap();
        let mut rng = RngStream::new(31);
        let params = init_params(&cfg, &mut rng);
        let n = 4;
        let xs: Vec<f64> = (0..n * 16).map(|_| rng.next_f64()).collect();
        let eps = rng.normal_vec(n * 3);
        let hp = HyperpriorParams::from_target_covariance(&SpdMatrix::identity(3), 8.0).unwrap();
        let obj = Objective::Chyvae(hp.clone());
        let ev = evaluate_batch(&params, &obj, &xs, n, &eps, false).unwrap();

        let posts = encode_batch(&params, &xs, n).unwrap();
        let mut items = Vec::new();
        for (i, post) in posts.iter().enumerate() {
            let z = gaussian_reparam(&post.mu, &post.chol, &eps[i * 3..(i + 1) * 3]).unwrap();
            let xh = decode_batch(&params, &z, 1).unwrap();
            items.push(chyvae_loss(&xs[i * 16..(i + 1) * 16], post, &z, &hp, &xh).unwrap());
        }
        let want = ElboBreakdown::mean(&items);
        for (a, b) in [
            (ev.breakdown.recon, want.recon),
            (ev.breakdown.gaussian_term, want.gaussian_term),
            (ev.breakdown.iw_term, want.iw_term),
            (ev.breakdown.total, want.total),
        ] {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }

        let dcfg = ModelConfig { mode: EncoderMode::Diagonal, ..cfg };
        let dparams = init_params(&dcfg, &mut rng);
        let ev = evaluate_batch(&dparams, &Objective::BetaVae { beta: 4.0 }, &xs, n, &eps, false).unwrap();
        let posts = encode_batch(&dparams, &xs, n).unwrap();
        let mut items = Vec::new();
        for (i, post) in posts.iter().enumerate() {
            let z = gaussian_reparam(&post.mu, &post.chol, &eps[i * 3..(i + 1) * 3]).unwrap();
            let xh = decode_batch(&dparams, &z, 1).unwrap();
            items.push(beta_vae_loss(&xs[i * 16..(i + 1) * 16], post, &z, 4.0, &xh).unwrap());
        }
        let want = ElboBreakdown::mean(&items);
        assert!((ev.breakdown.total - want.total).abs() < 1e-9 * want.total.abs());
        assert!(evaluate_batch(&params, &Objective::BetaVae { beta: 1.0 }, &xs, n, &eps, false).is_err());
    }
}
