//! Probability toolkit: random streams, multivariate normal,
//! inverse-Wishart densities, KLs, expectations and samplers.

mod gaussian;
mod rng;
mod special;
mod wishart;

pub use gaussian::{gaussian_kl, gaussian_reparam, mvn_log_pdf};
pub use rng::{philox4x32_10, RngStream};
pub use special::{mv_digamma, mv_gamma_ln};
pub use wishart::{
    chi_square_sample, conjugate_posterior, conjugate_posterior_dense, gamma_sample, iw_expected_inverse,
    iw_expected_logdet, iw_kl, iw_kl_posterior, iw_log_pdf, iw_mean, iw_sample_bartlett, wishart_sample_bartlett,
    HyperpriorParams, PosteriorIwParams,
};
