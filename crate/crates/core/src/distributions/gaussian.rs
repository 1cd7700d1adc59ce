use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, LowerTriangular, SpdMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `z = μ + L·ε`.
pub fn gaussian_reparam(mu: &[f64], chol: &LowerTriangular, eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != chol.dim() {
        return Err(Error::dims(chol.dim(), mu.len()));
    }
    let le = chol.mat_vec(eps)?;
    Ok(mu.iter().zip(le).map(|(m, e)| m + e).collect())
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₀, Σ₀))`.
pub fn gaussian_kl(mu1: &[f64], sigma1: &SpdMatrix, mu0: &[f64], sigma0: &SpdMatrix) -> Result<f64> {
    let p = sigma0.dim();
    if sigma1.dim() != p || mu1.len() != p || mu0.len() != p {
        return Err(Error::dims(p, format!("{}/{}/{}", sigma1.dim(), mu1.len(), mu0.len())));
    }
    let k0 = cholesky(sigma0)?;
    let k1 = cholesky(sigma1)?;
    let sigma0_inv = k0.gram_inverse();
    let diff: Vec<f64> = mu0.iter().zip(mu1).map(|(a, b)| a - b).collect();
    let maha = sigma0_inv.quad_form(&diff)?;
    let trace = sigma0_inv.trace_product(sigma1)?;
    Ok(0.5 * (k0.log_det_gram() - k1.log_det_gram() - p as f64 + trace + maha))
}

/// `log N(x | μ, Σ)`.
pub fn mvn_log_pdf(x: &[f64], mu: &[f64], sigma: &SpdMatrix) -> Result<f64> {
    let p = sigma.dim();
    if x.len() != p || mu.len() != p {
        return Err(Error::dims(p, format!("{}/{}", x.len(), mu.len())));
    }
    let k = cholesky(sigma)?;
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let w = k.solve_lower(&diff)?;
    Ok(-0.5 * (p as f64 * LN_2PI + k.log_det_gram() + dot(&w, &w)))
}
