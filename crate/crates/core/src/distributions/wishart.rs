//! Inverse-Wishart hyperprior, its conjugate update and Bartlett sampling.

use std::f64::consts::LN_2;

use super::rng::RngStream;
use super::special::{mv_digamma, mv_gamma_ln};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_spd, rank1_inverse, rank1_logdet, spd_inverse, LowerTriangular, SpdMatrix};

/// An inverse-Wishart `W⁻¹(Ψ, ν)` with `Ψ⁻¹` and `log|Ψ|` cached.
///
/// This is the covariance hyperprior of the model; the same type also
/// describes the conjugate posterior `W⁻¹(Φ, λ)` when a dense `Φ` is needed
/// (sampling, densities).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperpriorParams {
    psi: SpdMatrix,
    nu: f64,
    psi_inv: SpdMatrix,
    logdet_psi: f64,
}

/// Conjugate posterior `W⁻¹(Φ, λ)` given one latent code, in the forms the
/// loss consumes.
#[derive(Clone, Debug)]
pub struct PosteriorIwParams {
    pub phi_logdet: f64,
    pub phi_inv: SpdMatrix,
    pub lambda: f64,
}

impl HyperpriorParams {
    pub fn new(psi: SpdMatrix, nu: f64) -> Result<Self> {
        let p = psi.dim() as f64;
        if !(nu > p - 1.0) || !nu.is_finite() {
            return Err(Error::domain(format!("degrees of freedom {nu} must exceed p - 1 = {}", p - 1.0)));
        }
        let k = cholesky(&psi)?;
        let psi_inv = k.gram_inverse();
        let logdet_psi = k.log_det_gram();
        Ok(Self { psi, nu, psi_inv, logdet_psi })
    }

    /// `Ψ = (ν − p − 1)·Σ₀`, which makes the prior mean equal `Σ₀`.
    pub fn from_target_covariance(sigma0: &SpdMatrix, nu: f64) -> Result<Self> {
        let p = sigma0.dim() as f64;
        if !(nu > p + 1.0) {
            return Err(Error::domain(format!(
                "nu = {nu} must exceed p + 1 = {} for Psi = (nu - p - 1) Sigma0",
                p + 1.0
            )));
        }
        Self::new(sigma0.scale(nu - p - 1.0), nu)
    }

    pub fn dim(&self) -> usize {
        self.psi.dim()
    }

    pub fn psi(&self) -> &SpdMatrix {
        &self.psi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn psi_inv(&self) -> &SpdMatrix {
        &self.psi_inv
    }

    pub fn logdet_psi(&self) -> f64 {
        self.logdet_psi
    }

    /// The conjugate posterior as a dense distribution, `W⁻¹(Ψ + zzᵀ, ν + 1)`.
    pub fn posterior_distribution(&self, z: &[f64]) -> Result<HyperpriorParams> {
        let post = conjugate_posterior(self, z)?;
        Ok(HyperpriorParams {
            psi: self.psi.add_outer(z, 1.0)?,
            nu: post.lambda,
            psi_inv: post.phi_inv,
            logdet_psi: post.phi_logdet,
        })
    }
}

pub fn iw_log_pdf(x: &SpdMatrix, hp: &HyperpriorParams) -> Result<f64> {
    let p = hp.dim();
    if x.dim() != p {
        return Err(Error::dims(p, x.dim()));
    }
    let (pf, nu) = (p as f64, hp.nu);
    let kx = cholesky(x)?;
    let trace = hp.psi.trace_product(&kx.gram_inverse())?;
    Ok(0.5 * nu * hp.logdet_psi - 0.5 * nu * pf * LN_2 - mv_gamma_ln(p, nu / 2.0)?
        - 0.5 * (nu + pf + 1.0) * kx.log_det_gram()
        - 0.5 * trace)
}

/// `Ψ / (ν − p − 1)`.
pub fn iw_mean(hp: &HyperpriorParams) -> Result<SpdMatrix> {
    let p = hp.dim() as f64;
    if !(hp.nu > p + 1.0) {
        return Err(Error::domain(format!("mean undefined for nu = {} <= p + 1", hp.nu)));
    }
    Ok(hp.psi.scale(1.0 / (hp.nu - p - 1.0)))
}

/// `E[log|X|] = log(|Ψ|/2ᵖ) − ψₚ(ν/2)`.
pub fn iw_expected_logdet(hp: &HyperpriorParams) -> Result<f64> {
    let p = hp.dim();
    Ok(hp.logdet_psi - p as f64 * LN_2 - mv_digamma(p, hp.nu / 2.0)?)
}

/// `E[X⁻¹] = ν·Ψ⁻¹`.
pub fn iw_expected_inverse(hp: &HyperpriorParams) -> SpdMatrix {
    hp.psi_inv.scale(hp.nu)
}

/// `KL(W⁻¹(Φ, λ) ‖ W⁻¹(Ψ, ν))` for a dense `Φ`.
pub fn iw_kl(q_phi: &SpdMatrix, q_lambda: f64, hp: &HyperpriorParams) -> Result<f64> {
    if q_phi.dim() != hp.dim() {
        return Err(Error::dims(hp.dim(), q_phi.dim()));
    }
    let k = cholesky(q_phi)?;
    let q = PosteriorIwParams {
        phi_logdet: k.log_det_gram(),
        phi_inv: k.gram_inverse(),
        lambda: q_lambda,
    };
    iw_kl_posterior(&q, hp)
}

/// [`iw_kl`] from the cached posterior forms `log|Φ|`, `Φ⁻¹`.
pub fn iw_kl_posterior(q: &PosteriorIwParams, hp: &HyperpriorParams) -> Result<f64> {
    let p = hp.dim();
    let (nu, lambda) = (hp.nu, q.lambda);
    if !(lambda > p as f64 - 1.0) {
        return Err(Error::domain(format!("lambda = {lambda} must exceed p - 1")));
    }
    // log|ΨΦ⁻¹| = log|Ψ| − log|Φ|
    let log_ratio = hp.logdet_psi - q.phi_logdet;
    let trace = hp.psi.trace_product(&q.phi_inv)?;
    Ok(-0.5 * nu * log_ratio + 0.5 * lambda * (trace - p as f64) + mv_gamma_ln(p, nu / 2.0)?
        - mv_gamma_ln(p, lambda / 2.0)?
        + 0.5 * (lambda - nu) * mv_digamma(p, lambda / 2.0)?)
}

/// Gamma(shape, 1) by Marsaglia–Tsang; shapes below one are boosted by `U^(1/shape)`.
pub fn gamma_sample(shape: f64, rng: &mut RngStream) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::domain(format!("gamma shape {shape} must be positive")));
    }
    if shape < 1.0 {
        let g = gamma_sample(shape + 1.0, rng)?;
        return Ok(g * rng.open01().powf(1.0 / shape));
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.standard_normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.open01();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return Ok(d * v);
        }
    }
}

/// χ²(k) as Gamma(k/2, scale 2).
pub fn chi_square_sample(k: f64, rng: &mut RngStream) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::domain(format!("chi-square degrees of freedom {k} must be positive")));
    }
    Ok(2.0 * gamma_sample(k / 2.0, rng)?)
}

/// Lower-triangular Bartlett factor `B`: `Bᵢᵢ² ~ χ²(ν − i + 1)` (1-based),
/// `Bᵢⱼ ~ N(0, 1)` below the diagonal.
fn bartlett_factor(p: usize, nu: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut b = vec![0.0; p * p];
    for i in 0..p {
        b[i * p + i] = chi_square_sample(nu - i as f64, rng)?.sqrt();
        for j in 0..i {
            b[i * p + j] = rng.standard_normal();
        }
    }
    Ok(b)
}

/// Lower-triangular product of two lower-triangular matrices.
fn lower_product(a: &LowerTriangular, b: &[f64]) -> Vec<f64> {
    let p = a.dim();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            out[i * p + j] = (j..=i).map(|k| a.get(i, k) * b[k * p + j]).sum();
        }
    }
    out
}

/// One draw `X ~ W(Ψ⁻¹, ν)` returned through its Cholesky factor `V·B`.
fn wishart_factor(hp: &HyperpriorParams, rng: &mut RngStream) -> Result<LowerTriangular> {
    let p = hp.dim();
    let v = cholesky(&hp.psi_inv)?;
    let b = bartlett_factor(p, hp.nu, rng)?;
    LowerTriangular::new(p, lower_product(&v, &b))
}

/// `X = V·B·Bᵀ·Vᵀ ~ W(Ψ⁻¹, ν)` with `V` the Cholesky factor of `Ψ⁻¹`.
pub fn wishart_sample_bartlett(hp: &HyperpriorParams, rng: &mut RngStream) -> Result<SpdMatrix> {
    Ok(wishart_factor(hp, rng)?.gram())
}

/// `X⁻¹ ~ W⁻¹(Ψ, ν)` where `X ~ W(Ψ⁻¹, ν)` by Bartlett decomposition.
///
/// `V·B` is already the Cholesky factor of `X`, so the inverse needs no
/// further factorization.
pub fn iw_sample_bartlett(hp: &HyperpriorParams, rng: &mut RngStream) -> Result<SpdMatrix> {
    Ok(wishart_factor(hp, rng)?.gram_inverse())
}

/// `p(Σ | z) = W⁻¹(Ψ + zzᵀ, ν + 1)` through the rank-1 identities.
pub fn conjugate_posterior(hp: &HyperpriorParams, z: &[f64]) -> Result<PosteriorIwParams> {
    Ok(PosteriorIwParams {
        phi_logdet: rank1_logdet(hp.logdet_psi, &hp.psi_inv, z)?,
        phi_inv: rank1_inverse(&hp.psi_inv, z)?,
        lambda: hp.nu + 1.0,
    })
}

/// Dense-path counterpart of [`conjugate_posterior`], kept for cross-checks.
pub fn conjugate_posterior_dense(hp: &HyperpriorParams, z: &[f64]) -> Result<PosteriorIwParams> {
    let phi = hp.psi.add_outer(z, 1.0)?;
    Ok(PosteriorIwParams {
        phi_logdet: log_det_spd(&phi)?,
        phi_inv: spd_inverse(&phi)?,
        lambda: hp.nu + 1.0,
    })
}
