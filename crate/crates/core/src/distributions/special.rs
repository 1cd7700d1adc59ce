use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

fn check_domain(p: usize, a: f64) -> Result<()> {
    if p == 0 {
        return Err(Error::domain("multivariate gamma needs p >= 1"));
    }
    let floor = (p as f64 - 1.0) / 2.0;
    if !(a > floor) {
        return Err(Error::domain(format!("argument {a} must exceed (p-1)/2 = {floor}")));
    }
    Ok(())
}

/// `log Γₚ(a) = p(p−1)/4 · log π + Σⱼ log Γ(a + (1−j)/2)`.
pub fn mv_gamma_ln(p: usize, a: f64) -> Result<f64> {
    check_domain(p, a)?;
    let pf = p as f64;
    let head = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    Ok(head + (1..=p).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>())
}

/// `ψₚ(a) = Σⱼ ψ(a + (1−j)/2)`, the derivative of [`mv_gamma_ln`].
pub fn mv_digamma(p: usize, a: f64) -> Result<f64> {
    check_domain(p, a)?;
    Ok((1..=p).map(|j| digamma(a + (1.0 - j as f64) / 2.0)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn univariate_cases() {
        assert!(mv_gamma_ln(1, 1.0).unwrap().abs() < 1e-14);
        assert!((mv_gamma_ln(1, 5.0).unwrap() - 24f64.ln()).abs() < 1e-12);
        assert!((mv_gamma_ln(1, 5.0).unwrap() - 3.17805).abs() < 1e-5);
    }

    #[test]
    fn trivariate_matches_closed_form_gammas() {
        // Γ(4) = 6, Γ(3.5) = 15√π/8, Γ(3) = 2
        let pi = std::f64::consts::PI;
        let expect = 1.5 * pi.ln() + 6f64.ln() + (15.0 * pi.sqrt() / 8.0).ln() + 2f64.ln();
        assert!((mv_gamma_ln(3, 4.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn digamma_closed_forms() {
        assert!((mv_digamma(1, 1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        // ψ(3) = 1 + 1/2 − γ ; ψ(5/2) = 8/3 − 2 ln 2 − γ
        let expect = (1.5 - EULER_GAMMA) + (8.0 / 3.0 - 2.0 * 2f64.ln() - EULER_GAMMA);
        assert!((mv_digamma(2, 3.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn digamma_is_derivative_of_mv_gamma_ln() {
        let h = 1e-5;
        let fd = (mv_gamma_ln(4, 6.0 + h).unwrap() - mv_gamma_ln(4, 6.0 - h).unwrap()) / (2.0 * h);
        assert!((fd - mv_digamma(4, 6.0).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        assert!(mv_gamma_ln(3, 1.0).is_err());
        assert!(mv_gamma_ln(3, 1.01).is_ok());
        assert!(mv_digamma(2, 0.5).is_err());
        assert!(mv_gamma_ln(0, 1.0).is_err());
    }
}
